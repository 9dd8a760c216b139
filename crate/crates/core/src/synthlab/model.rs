use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{SynthSample, N_SYMBOLS};
use crate::audiofeat::{FeatureMatrix, VuvFlags, LOW_BAND_BINS};
use crate::diffcore::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::{sd_loss, sp_loss, MlpHead};
use crate::quantizer::{rvq_loss, RvqTrace};
use crate::styleenc::{ConvBlock, EncoderMode, Linear, StyleEncoder, StyleEncoderConfig, StyleOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: StyleEncoderConfig,
    pub n_symbols: usize,
    pub decoder_blocks: usize,
    /// Per-bin standardization applied to reference mels before the style
    /// encoder, `(x − input_mean[b]) / input_std[b]`. Empty means identity.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: StyleEncoderConfig::default(),
            n_symbols: N_SYMBOLS,
            decoder_blocks: 3,
            input_mean: Vec::new(),
            input_std: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// Smaller width for minutes-scale runs on one CPU thread.
    pub fn lab() -> Self {
        Self {
            encoder: StyleEncoderConfig {
                dim: 64,
                ..StyleEncoderConfig::default()
            },
            ..Self::default()
        }
    }

    /// Sets the per-bin input standardization from the frames of `samples`.
    pub fn fit_input_stats(&mut self, samples: &[SynthSample]) {
        let bins = self.encoder.mel_bins;
        let (mut n, mut sum, mut sq) = (0usize, vec![0.0; bins], vec![0.0; bins]);
        for row in samples.iter().flat_map(|s| s.mel.iter_rows()) {
            if row.len() != bins {
                continue;
            }
            n += 1;
            for (b, &v) in row.iter().enumerate() {
                sum[b] += v as f64;
                sq[b] += (v as f64).powi(2);
            }
        }
        if n < 2 {
            return;
        }
        self.input_mean = sum.iter().map(|s| s / n as f64).collect();
        self.input_std = sq
            .iter()
            .zip(&self.input_mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
    }

    fn standardize(&self, mel: &FeatureMatrix) -> Vec<f64> {
        let cols = mel.cols();
        mel.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let b = i % cols;
                match (self.input_mean.get(b), self.input_std.get(b)) {
                    (Some(m), Some(s)) => (v as f64 - m) / s,
                    _ => v as f64,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let stats_ok = self.input_mean.len() == self.input_std.len()
            && (self.input_mean.is_empty() || self.input_mean.len() == self.encoder.mel_bins)
            && self.input_mean.iter().all(|m| m.is_finite())
            && self.input_std.iter().all(|s| s.is_finite() && *s > 0.0);
        if !stats_ok {
            return Err(Error::invalid(
                "model_config",
                "input_mean/input_std must be empty or hold one finite value per mel bin (std > 0)",
            ));
        }
        if self.n_symbols == 0 {
            return Err(Error::invalid("model_config", "n_symbols must be positive"));
        }
        if self.encoder.mel_bins < LOW_BAND_BINS {
            return Err(Error::invalid(
                "model_config",
                format!("mel_bins must be at least {LOW_BAND_BINS}"),
            ));
        }
        Ok(())
    }
}

/// Content encoder, style encoder, global head and decoder.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ModelConfig,
    content_table: ParamId,
    content_in: Linear,
    content_out: Linear,
    pub style: StyleEncoder,
    global: Linear,
    decoder: Vec<ConvBlock>,
    output: Linear,
    pub head_style: MlpHead,
    pub head_prosody: MlpHead,
}

/// Graph nodes of one forward pass.
pub struct ForwardOut {
    pub content: Var,
    pub style: StyleOutput,
    pub mel: Var,
}

/// Per-sample loss nodes before batch averaging.
pub struct SampleLosses {
    pub recon: Var,
    pub rvq: Option<Var>,
    pub sd: Var,
    pub sp: Var,
    pub forward: ForwardOut,
}

impl ToyModel {
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.dim;
        let content_table = store.normal("content.table", &[config.n_symbols, d], 1.0, rng)?;
        let content_in = Linear::new(store, "content.fc1", d, d, true, rng)?;
        let content_out = Linear::new(store, "content.fc2", d, d, true, rng)?;
        let style = StyleEncoder::new(config.encoder.clone(), store, "style", rng)?;
        let global = Linear::new(store, "global", d, d, true, rng)?;
        let decoder = (0..config.decoder_blocks)
            .map(|i| ConvBlock::new(store, &format!("decoder.block{i}"), d, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(store, "decoder.out", d, config.encoder.mel_bins, true, rng)?;
        let head_style = MlpHead::new(store, "head.style", d, rng)?;
        let head_prosody = MlpHead::new(store, "head.prosody", LOW_BAND_BINS, rng)?;
        Ok(Self {
            config,
            content_table,
            content_in,
            content_out,
            style,
            global,
            decoder,
            output,
            head_style,
            head_prosody,
        })
    }

    pub fn encode_content<F: Element>(&self, tape: &mut Tape<F>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("encode_content", "empty content sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.n_symbols) {
            return Err(Error::invalid(
                "encode_content",
                format!("symbol {bad} outside 0..{}", self.config.n_symbols),
            ));
        }
        let table = tape.param(self.content_table);
        let emb = tape.gather_rows(table, ids)?;
        let h = self.content_in.forward(tape, emb)?;
        let h = tape.gelu(h);
        self.content_out.forward(tape, h)
    }

    /// Decodes `content` ids with the style of a reference mel.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        content_ids: &[usize],
        reference: &FeatureMatrix,
        reference_vuv: &VuvFlags,
        mode: &EncoderMode,
        frozen: Option<&RvqTrace>,
    ) -> Result<ForwardOut> {
        let content = self.encode_content(tape, content_ids)?;
        let normalized = self.config.standardize(reference);
        let mel = tape.constant(Tensor::from_f64(vec![reference.rows(), reference.cols()], &normalized)?);
        let style = self.style.encode(tape, mel, reference_vuv, content, mode, frozen)?;
        let pooled = tape.mean_rows(style.aligned)?;
        let global = self.global.forward(tape, pooled)?;
        let h = tape.add(content, style.aligned)?;
        let mut h = tape.add_row(h, global)?;
        for block in &self.decoder {
            h = block.forward(tape, h)?;
        }
        let mel = self.output.forward(tape, h)?;
        Ok(ForwardOut { content, style, mel })
    }

    /// Self-reconstruction of `sample` with every loss term.
    pub fn sample_losses<F: Element>(
        &self,
        tape: &mut Tape<F>,
        sample: &SynthSample,
        mode: &EncoderMode,
        frozen: Option<&RvqTrace>,
    ) -> Result<SampleLosses> {
        let fwd = self.forward(tape, &sample.content_ids, &sample.mel, &sample.vuv, mode, frozen)?;
        let target = tape.constant(sample.mel.to_tensor().cast());
        let diff = tape.sub(fwd.mel, target)?;
        let abs = tape.abs(diff);
        let recon = tape.mean(abs);
        let rvq = match &fwd.style.quant {
            Some(q) => Some(rvq_loss(tape, q)?),
            None => None,
        };
        let sd = sd_loss(tape, fwd.content, fwd.style.aligned)?;
        let low = tape.constant(sample.low_band().to_tensor().cast());
        let sp = sp_loss(tape, fwd.style.aligned, low, &self.head_style, &self.head_prosody)?;
        Ok(SampleLosses {
            recon,
            rvq,
            sd,
            sp,
            forward: fwd,
        })
    }
}

/// Copies a `T×C` node into a feature matrix.
pub fn to_features<F: Element>(tape: &Tape<F>, v: Var) -> Result<FeatureMatrix> {
    let t: &Tensor<F> = tape.value(v);
    FeatureMatrix::new(t.rows(), t.cols(), t.data().iter().map(|x| x.as_f64() as f32).collect())
}

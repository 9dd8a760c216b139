//! Voiced-aware style encoder.
//!
//! Pipeline: residual conv frontend → voiced-frame extraction → residual
//! VQ → mask codes scattered back into unvoiced positions → unvoiced filler
//! blocks (ConvNeXt + biased self-attention) → cross-attention onto the
//! content time axis.

mod attention;
mod blocks;

pub use attention::{
    align_to_content, biased_self_attention, biased_self_attention_traced, AttentionMode, AttentionTrace,
    AttentionWeights,
};
pub use blocks::{ConvBlock, Linear};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::VuvFlags;
use crate::diffcore::{Element, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::quantizer::{QuantMode, QuantizeOutput, RvqConfig, RvqStack, RvqTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleEncoderConfig {
    pub dim: usize,
    pub mel_bins: usize,
    pub conv_blocks: usize,
    pub uf_blocks: usize,
    pub rvq_depth: usize,
    pub codebook_size: usize,
    pub commitment_weight: f64,
    pub beta_mask: f64,
    pub attention_heads: usize,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            mel_bins: 80,
            conv_blocks: 4,
            uf_blocks: 3,
            rvq_depth: 4,
            codebook_size: 128,
            commitment_weight: 0.25,
            beta_mask: 0.02,
            attention_heads: 1,
        }
    }
}

impl StyleEncoderConfig {
    pub fn rvq(&self) -> RvqConfig {
        RvqConfig {
            codebook_size: self.codebook_size,
            dim: self.dim,
            depth: self.rvq_depth,
            commitment_weight: self.commitment_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("style_encoder_config", msg));
        if !(self.beta_mask > 0.0 && self.beta_mask <= 1.0) {
            return bad(format!("beta_mask {} outside (0, 1]", self.beta_mask));
        }
        if self.uf_blocks == 0 {
            return bad("uf_blocks must be at least 1".into());
        }
        if self.dim == 0 || self.mel_bins == 0 {
            return bad("dim and mel_bins must be positive".into());
        }
        if self.attention_heads == 0 || !self.dim.is_multiple_of(self.attention_heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.attention_heads));
        }
        self.rvq().validate()
    }
}

/// Switches used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderMode {
    pub quant: QuantMode,
    /// Run the unvoiced filler stack.
    pub unvoiced_filler: bool,
    /// Quantize only voiced frames and insert mask codes elsewhere.
    pub voiced_extraction: bool,
    pub attention: AttentionMode,
}

impl Default for EncoderMode {
    fn default() -> Self {
        Self {
            quant: QuantMode::Rt,
            unvoiced_filler: true,
            voiced_extraction: true,
            attention: AttentionMode::Reweight,
        }
    }
}

/// Voiced rows of `x` in order, with their source positions.
pub fn extract_voiced<F: Element>(tape: &mut Tape<F>, x: Var, vuv: &VuvFlags) -> Result<(Var, Vec<usize>)> {
    let t = tape.shape(x).first().copied().unwrap_or(0);
    if vuv.len() != t {
        return Err(Error::shape("extract_voiced", tape.shape(x), &[vuv.len()]));
    }
    let index = vuv.voiced_positions();
    let rows = tape.gather_rows(x, &index)?;
    Ok((rows, index))
}

/// Inverse of [`extract_voiced`]: `q` rows go back to `index_map`, every
/// other row is the shared mask vector.
pub fn scatter_with_mask_codes<F: Element>(
    tape: &mut Tape<F>,
    q: Var,
    index_map: &[usize],
    len: usize,
    mask: Var,
) -> Result<Var> {
    tape.scatter_rows(q, mask, index_map, len)
}

/// Encoder output before and after alignment.
pub struct StyleOutput {
    /// `T_c×D` style embedding aligned to content.
    pub aligned: Var,
    /// `T×D` frame-level embedding after the filler stack.
    pub frames: Var,
    /// Input to the residual quantizer, if it ran.
    pub quantizer_input: Option<Var>,
    pub quant: Option<QuantizeOutput>,
    /// `true` where a mask code was inserted.
    pub mask_positions: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub config: StyleEncoderConfig,
    input: Linear,
    frontend: Vec<ConvBlock>,
    rvq: RvqStack,
    mask: ParamId,
    filler: Vec<(ConvBlock, AttentionWeights)>,
    align: AttentionWeights,
}

impl StyleEncoder {
    /// Registers all encoder parameters under `prefix`.
    pub fn new<R: Rng>(
        config: StyleEncoderConfig,
        store: &mut ParamStore<f32>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let input = Linear::new(store, &format!("{prefix}.in"), config.mel_bins, d, true, rng)?;
        let frontend = (0..config.conv_blocks)
            .map(|i| ConvBlock::new(store, &format!("{prefix}.conv{i}"), d, rng))
            .collect::<Result<_>>()?;
        let rvq = RvqStack::new(config.rvq(), store, &format!("{prefix}.rvq"), rng)?;
        let mask = store.uniform(format!("{prefix}.mask"), &[1, d], 0.1, rng)?;
        let filler = (0..config.uf_blocks)
            .map(|i| {
                Ok((
                    ConvBlock::new(store, &format!("{prefix}.uf{i}.conv"), d, rng)?,
                    AttentionWeights::new(store, &format!("{prefix}.uf{i}.attn"), d, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        let align = AttentionWeights::new(store, &format!("{prefix}.align"), d, rng)?;
        Ok(Self {
            config,
            input,
            frontend,
            rvq,
            mask,
            filler,
            align,
        })
    }

    pub fn rvq(&self) -> &RvqStack {
        &self.rvq
    }

    pub fn mask_param(&self) -> ParamId {
        self.mask
    }

    /// Pointwise `mel_bins → D` projection followed by the residual blocks.
    pub fn conv_frontend<F: Element>(&self, tape: &mut Tape<F>, mel: Var) -> Result<Var> {
        let shape = tape.shape(mel).to_vec();
        if shape.len() != 2 || shape[1] != self.config.mel_bins || shape[0] == 0 {
            return Err(Error::shape("conv_frontend", &shape, &[0, self.config.mel_bins]));
        }
        let mut h = self.input.forward(tape, mel)?;
        for block in &self.frontend {
            h = block.forward(tape, h)?;
        }
        Ok(h)
    }

    pub fn unvoiced_filler<F: Element>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        mask_positions: &[bool],
        attention: AttentionMode,
    ) -> Result<Var> {
        let mut h = x;
        for (conv, attn) in &self.filler {
            h = conv.forward(tape, h)?;
            h = biased_self_attention(
                tape,
                h,
                attn,
                mask_positions,
                self.config.beta_mask,
                self.config.attention_heads,
                attention,
            )?;
        }
        Ok(h)
    }

    pub fn align_to_content<F: Element>(&self, tape: &mut Tape<F>, style: Var, content: Var) -> Result<Var> {
        align_to_content(tape, style, content, &self.align)
    }

    /// Full encoder. `mel` is `T×mel_bins`, `vuv` has `T` flags and
    /// `content` is `T_c×D`. With `frozen`, quantizer choices are replayed
    /// from an earlier pass.
    pub fn encode<F: Element>(
        &self,
        tape: &mut Tape<F>,
        mel: Var,
        vuv: &VuvFlags,
        content: Var,
        mode: &EncoderMode,
        frozen: Option<&RvqTrace>,
    ) -> Result<StyleOutput> {
        let h = self.conv_frontend(tape, mel)?;
        let t = tape.shape(h)[0];
        if vuv.len() != t {
            return Err(Error::shape("encode_style", tape.shape(mel), &[vuv.len()]));
        }
        let mask = tape.param(self.mask);

        let (filled, quantizer_input, quant, mask_positions) = if mode.voiced_extraction {
            let (voiced, index) = extract_voiced(tape, h, vuv)?;
            let mask_positions: Vec<bool> = vuv.flags.iter().map(|&v| !v).collect();
            if index.is_empty() {
                let filled = tape.gather_rows(mask, &vec![0; t])?;
                (filled, None, None, mask_positions)
            } else {
                let out = self.rvq.forward(tape, voiced, mode.quant, frozen)?;
                let filled = scatter_with_mask_codes(tape, out.quantized, &index, t, mask)?;
                (filled, Some(voiced), Some(out), mask_positions)
            }
        } else {
            let out = self.rvq.forward(tape, h, mode.quant, frozen)?;
            (out.quantized, Some(h), Some(out), vec![false; t])
        };

        let frames = if mode.unvoiced_filler {
            self.unvoiced_filler(tape, filled, &mask_positions, mode.attention)?
        } else {
            filled
        };
        let aligned = self.align_to_content(tape, frames, content)?;
        Ok(StyleOutput {
            aligned,
            frames,
            quantizer_input,
            quant,
            mask_positions,
        })
    }
}

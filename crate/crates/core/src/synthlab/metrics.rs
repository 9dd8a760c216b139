use serde::{Deserialize, Serialize};

use super::data::{energy_ratio_vuv, SynthDataset, SynthSample, StyleParams, SYNTH_SAMPLE_RATE};
use super::model::{to_features, ToyModel};
use crate::audiofeat::{FeatureMatrix, MelConfig, MelFilterbank, VuvFlags, LOW_BAND_BINS};
use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::quantizer::utilization;
use crate::styleenc::EncoderMode;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub vuv_f1: f64,
    /// RMSE in Hz between ground-truth F0 and the low-band argmax decoded
    /// from a mel (voiced frames only). A mel-domain stand-in for F0 error.
    pub rmse_f0_proxy: f64,
    pub orthogonality: f64,
    pub utilization: Vec<f64>,
    pub recon_l1: f64,
    /// `Σ‖e − q‖² / Σ‖e‖²` over quantized frames.
    pub quant_error: f64,
}

/// F1 of the voiced class.
pub fn vuv_f1(truth: &VuvFlags, pred: &VuvFlags) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.flags.iter().zip(&pred.flags) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return if fp == 0 && fneg == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Maps low-band argmax bins back to Hz through the filter centres.
#[derive(Clone, Debug)]
pub struct F0Decoder {
    centers: Vec<f64>,
}

impl Default for F0Decoder {
    fn default() -> Self {
        Self::new()
    }
}

impl F0Decoder {
    pub fn new() -> Self {
        let fb = MelFilterbank::new(SYNTH_SAMPLE_RATE, &MelConfig::default());
        Self {
            centers: fb.center_frequencies()[..LOW_BAND_BINS].to_vec(),
        }
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn frame(&self, frame: &[f32]) -> f64 {
        let (best, _) = frame[..LOW_BAND_BINS]
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        self.centers[best]
    }

    pub fn contour(&self, mel: &FeatureMatrix) -> Vec<f64> {
        mel.iter_rows().map(|r| self.frame(r)).collect()
    }

    /// Largest distance from a low-band frequency to its nearest centre.
    pub fn quantization_bound(&self) -> f64 {
        self.centers.windows(2).map(|w| (w[1] - w[0]) / 2.0).fold(0.0, f64::max)
    }
}

/// Accumulates reconstruction-side metrics sample by sample.
#[derive(Default)]
struct ReconAccumulator {
    truth: Vec<bool>,
    pred: Vec<bool>,
    sq_f0: f64,
    n_f0: usize,
    l1: f64,
    l1_n: usize,
}

impl ReconAccumulator {
    fn add(&mut self, sample: &SynthSample, recon: &FeatureMatrix, dec: &F0Decoder) {
        self.truth.extend_from_slice(&sample.vuv.flags);
        self.pred.extend(energy_ratio_vuv(recon).flags);
        for (i, &v) in sample.vuv.flags.iter().enumerate() {
            if v {
                let e = dec.frame(recon.row(i)) - sample.f0[i];
                self.sq_f0 += e * e;
                self.n_f0 += 1;
            }
        }
        for (a, b) in recon.data().iter().zip(sample.mel.data()) {
            self.l1 += (a - b).abs() as f64;
        }
        self.l1_n += recon.data().len();
    }

    fn finish(self, m: &mut Metrics) {
        m.vuv_f1 = vuv_f1(&VuvFlags::new(self.truth), &VuvFlags::new(self.pred));
        m.rmse_f0_proxy = (self.sq_f0 / self.n_f0.max(1) as f64).sqrt();
        m.recon_l1 = self.l1 / self.l1_n.max(1) as f64;
    }
}

/// Metrics of a fixed set of reconstructions (no model involved). Passing
/// the references themselves gives the oracle bound.
pub fn reconstruction_metrics(samples: &[SynthSample], recons: &[FeatureMatrix]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if samples.len() != recons.len() {
        return Err(Error::invalid("reconstruction_metrics", "sample and reconstruction counts differ"));
    }
    let dec = F0Decoder::new();
    let mut acc = ReconAccumulator::default();
    for (s, r) in samples.iter().zip(recons) {
        if r.rows() != s.mel.rows() || r.cols() != s.mel.cols() {
            return Err(Error::shape("reconstruction_metrics", &[r.rows(), r.cols()], &[s.mel.rows(), s.mel.cols()]));
        }
        acc.add(s, r, &dec);
    }
    let mut m = Metrics::default();
    acc.finish(&mut m);
    Ok(m)
}

/// Mean squared cosine between every content row and every style row.
pub fn orthogonality(content: &Tensor<f32>, style: &Tensor<f32>) -> f64 {
    let normed = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| {
                let row: Vec<f64> = t.row(r).iter().map(|&v| v as f64).collect();
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.into_iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (c, s) = (normed(content), normed(style));
    let mut total = 0.0;
    for a in &c {
        for b in &s {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += d * d;
        }
    }
    total / (c.len() * s.len()).max(1) as f64
}

/// Self-reconstruction of every sample in `samples`, scored.
pub fn eval_metrics(
    model: &ToyModel,
    store: &ParamStore<f32>,
    samples: &[SynthSample],
    mode: &EncoderMode,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let dec = F0Decoder::new();
    let depth = model.style.rvq().depth();
    let k = model.config.encoder.codebook_size;
    let mut acc = ReconAccumulator::default();
    let mut orth = 0.0;
    let mut indices: Vec<Vec<usize>> = Vec::new();
    let (mut q_err, mut q_norm) = (0.0, 0.0);
    for s in samples {
        let mut tape = Tape::<f32>::new();
        tape.bind_params(store);
        let fwd = model.forward(&mut tape, &s.content_ids, &s.mel, &s.vuv, mode, None)?;
        let recon = to_features(&tape, fwd.mel)?;
        acc.add(s, &recon, &dec);
        orth += orthogonality(tape.value(fwd.content), tape.value(fwd.style.aligned));
        if let (Some(q), Some(e)) = (&fwd.style.quant, fwd.style.quantizer_input) {
            indices.extend(q.indices.iter().cloned());
            let (ev, qv) = (tape.value(e).data(), tape.value(q.quantized).data());
            for (a, b) in ev.iter().zip(qv) {
                q_err += ((a - b) as f64).powi(2);
                q_norm += (*a as f64).powi(2);
            }
        }
    }
    let mut m = Metrics {
        orthogonality: orth / samples.len() as f64,
        utilization: (0..depth).map(|l| utilization(&indices, l, k)).collect(),
        quant_error: if q_norm > 0.0 { q_err / q_norm } else { 0.0 },
        ..Metrics::default()
    };
    acc.finish(&mut m);
    Ok(m)
}

/// Decodes `content`'s symbols with the style taken from `reference`.
pub fn style_transfer(
    model: &ToyModel,
    store: &ParamStore<f32>,
    content: &SynthSample,
    reference: &SynthSample,
    mode: &EncoderMode,
) -> Result<FeatureMatrix> {
    let mut tape = Tape::<f32>::new();
    tape.bind_params(store);
    let fwd = model.forward(
        &mut tape,
        &content.content_ids,
        &reference.mel,
        &reference.vuv,
        mode,
        None,
    )?;
    to_features(&tape, fwd.mel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub content_sample: (usize, usize),
    pub reference_sample: (usize, usize),
    pub dist_to_reference_style: f64,
    pub dist_to_content_style: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub pairs: Vec<TransferPair>,
    /// Fraction of pairs whose decoded contour is closer to the reference style.
    pub success_rate: f64,
}

/// L2 distance between the decoded F0 contour and a constant base on the
/// voiced frames of `vuv`.
fn contour_distance(contour: &[f64], vuv: &VuvFlags, base: f64) -> f64 {
    contour
        .iter()
        .zip(&vuv.flags)
        .filter(|(_, &v)| v)
        .map(|(&c, _)| (c - base).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Transfers every eval sample A onto every eval reference B with a
/// different style and different content.
pub fn transfer_eval(
    model: &ToyModel,
    store: &ParamStore<f32>,
    dataset: &SynthDataset,
    mode: &EncoderMode,
) -> Result<TransferReport> {
    let dec = F0Decoder::new();
    let styles: &[StyleParams] = &dataset.styles;
    let mut pairs = Vec::new();
    for a in &dataset.eval {
        for b in &dataset.eval {
            if a.style_id == b.style_id || a.content_id == b.content_id {
                continue;
            }
            let mel = style_transfer(model, store, a, b, mode)?;
            let contour = dec.contour(&mel);
            pairs.push(TransferPair {
                content_sample: (a.content_id, a.style_id),
                reference_sample: (b.content_id, b.style_id),
                dist_to_reference_style: contour_distance(&contour, &a.vuv, styles[b.style_id].f0_base),
                dist_to_content_style: contour_distance(&contour, &a.vuv, styles[a.style_id].f0_base),
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let wins = pairs
        .iter()
        .filter(|p| p.dist_to_reference_style < p.dist_to_content_style)
        .count();
    Ok(TransferReport {
        success_rate: wins as f64 / pairs.len() as f64,
        pairs,
    })
}

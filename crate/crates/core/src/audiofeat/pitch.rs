//! Normalized-autocorrelation F0 and voicing.

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::spectral::MelConfig;
use super::wav::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub fmin: f64,
    pub fmax: f64,
    /// Minimum normalized autocorrelation at the chosen lag.
    pub nac_threshold: f64,
    pub rms_threshold: f64,
    /// The first local NAC maximum reaching this fraction of the global
    /// maximum is taken as the period, suppressing sub-octave picks.
    pub peak_fraction: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 50.0,
            fmax: 600.0,
            nac_threshold: 0.5,
            rms_threshold: 0.01,
            peak_fraction: 0.9,
        }
    }
}

/// F0 in Hz per frame; 0 where unvoiced.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
}

/// One voiced/unvoiced decision per mel frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VuvFlags {
    pub flags: Vec<bool>,
}

impl VuvFlags {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn all(len: usize, voiced: bool) -> Self {
        Self { flags: vec![voiced; len] }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn voiced_positions(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    /// `rows×1` matrix of 0.0/1.0.
    pub fn to_feature(&self) -> FeatureMatrix {
        let data = self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        FeatureMatrix::new(self.flags.len(), 1, data).expect("column vector")
    }

    pub fn from_feature(m: &FeatureMatrix) -> Result<Self> {
        if m.cols() != 1 {
            return Err(Error::invalid("vuv", format!("expected one column, got {}", m.cols())));
        }
        Ok(Self::new(m.data().iter().map(|&v| v > 0.5).collect()))
    }
}

struct FrameAnalysis {
    f0: f64,
    voiced: bool,
}

fn analyze_frame(frame: &[f64], sample_rate: f64, cfg: &PitchConfig) -> FrameAnalysis {
    let unvoiced = FrameAnalysis { f0: 0.0, voiced: false };
    let n = frame.len();
    let rms = (frame.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms < cfg.rms_threshold {
        return unvoiced;
    }
    let min_lag = (sample_rate / cfg.fmax).floor().max(1.0) as usize;
    let max_lag = ((sample_rate / cfg.fmin).ceil() as usize).min(n - 2);
    if min_lag + 2 > max_lag {
        return unvoiced;
    }

    // nac[k] holds lag min_lag - 1 + k so every candidate has both neighbours.
    let lags = (min_lag - 1)..=(max_lag + 1);
    let nac: Vec<f64> = lags
        .map(|lag| {
            let (a, b) = (&frame[..n - lag], &frame[lag..]);
            let mut num = 0.0;
            let mut ea = 0.0;
            let mut eb = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                num += x * y;
                ea += x * x;
                eb += y * y;
            }
            let den = (ea * eb).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();

    let interior = 1..nac.len() - 1;
    let global = interior.clone().map(|k| nac[k]).fold(f64::NEG_INFINITY, f64::max);
    if !(global >= cfg.nac_threshold) {
        return unvoiced;
    }
    let is_peak = |k: usize| nac[k] >= nac[k - 1] && nac[k] >= nac[k + 1];
    let Some(k) = interior
        .clone()
        .find(|&k| is_peak(k) && nac[k] >= cfg.peak_fraction * global)
    else {
        return unvoiced;
    };
    if nac[k] < cfg.nac_threshold {
        return unvoiced;
    }

    let (y0, y1, y2) = (nac[k - 1], nac[k], nac[k + 1]);
    let curvature = y0 - 2.0 * y1 + y2;
    let shift = if curvature.abs() > 1e-12 {
        (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = (min_lag - 1 + k) as f64 + shift;
    let f0 = sample_rate / lag;
    if !(cfg.fmin..=cfg.fmax).contains(&f0) {
        return unvoiced;
    }
    FrameAnalysis { f0, voiced: true }
}

pub fn estimate_f0_vuv_with(w: &Waveform, mel: &MelConfig, cfg: &PitchConfig) -> Result<(PitchTrack, VuvFlags)> {
    if w.sample_rate < 8000 {
        return Err(Error::invalid(
            "estimate_f0_vuv",
            format!("sample rate {} below 8000 Hz", w.sample_rate),
        ));
    }
    let frames = mel.frame_count(w.len());
    let sr = w.sample_rate as f64;
    let (f0, flags) = (0..frames)
        .map(|t| {
            let start = t * mel.hop;
            let a = analyze_frame(&w.samples[start..start + mel.win], sr, cfg);
            (a.f0, a.voiced)
        })
        .unzip();
    Ok((PitchTrack { f0 }, VuvFlags::new(flags)))
}

/// Per-frame F0 and voicing on the mel framing (1024 window, hop 256).
pub fn estimate_f0_vuv(w: &Waveform) -> Result<(PitchTrack, VuvFlags)> {
    estimate_f0_vuv_with(w, &MelConfig::default(), &PitchConfig::default())
}

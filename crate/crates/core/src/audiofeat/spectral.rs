use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::wav::Waveform;
use crate::error::{Error, Result};

/// Framing and filterbank settings. Defaults: 1024-point FFT and window,
/// hop 256, 80 Slaney mel bands from 0 Hz to Nyquist, log floor 1e-5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            win: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for `len` samples without center padding.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            1 + (len - self.win) / self.hop
        }
    }
}

/// Log-mel frames plus the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: FeatureMatrix,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
    pub n_fft: usize,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.cols()
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Frame-by-frame STFT magnitudes.
pub struct Stft {
    config: MelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: MelConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        let window = hann_window(config.win);
        Self { config, window, fft }
    }

    fn check_len(&self, w: &Waveform) -> Result<()> {
        if w.len() < self.config.win {
            return Err(Error::TooShort {
                needed: self.config.win,
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Magnitude of one windowed frame starting at `start`.
    pub fn frame_magnitude(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let c = &self.config;
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        for (i, (b, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
            *b = Complex::new(samples[start + i] * w, 0.0);
        }
        self.fft.process(&mut buf);
        buf[..c.n_bins()].iter().map(|z| z.norm()).collect()
    }

    pub fn magnitudes(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        self.check_len(w)?;
        let frames = self.config.frame_count(w.len());
        Ok((0..frames)
            .map(|t| self.frame_magnitude(&w.samples, t * self.config.hop))
            .collect())
    }
}

/// `T×(n_fft/2+1)` STFT magnitudes: Hann window, no center padding.
pub fn stft_magnitude(w: &Waveform) -> Result<FeatureMatrix> {
    let mags = Stft::new(MelConfig::default()).magnitudes(w)?;
    let rows: Vec<Vec<f32>> = mags
        .into_iter()
        .map(|r| r.into_iter().map(|v| v as f32).collect())
        .collect();
    if rows.is_empty() {
        return Ok(FeatureMatrix::zeros(0, MelConfig::default().n_bins()));
    }
    FeatureMatrix::from_rows(&rows)
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Triangular Slaney-scale filterbank with area normalization.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    /// `n_mels + 2` band edges in Hz.
    edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, config: &MelConfig) -> Self {
        let sr = sample_rate as f64;
        let fmax = config.fmax.unwrap_or(sr / 2.0);
        let (n_mels, n_bins) = (config.n_mels, config.n_bins());
        let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let fft_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / config.n_fft as f64).collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
            let enorm = 2.0 / (f2 - f0);
            for (k, &f) in fft_freqs.iter().enumerate() {
                let lower = (f - f0) / (f1 - f0);
                let upper = (f2 - f) / (f2 - f1);
                weights[m * n_bins + k] = lower.min(upper).max(0.0) * enorm;
            }
        }
        Self {
            n_mels,
            n_bins,
            weights,
            edges,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Peak frequency of each filter.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.edges[1..self.n_mels + 1]
    }

    pub fn weights(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.weights(m).iter().zip(spectrum).map(|(w, s)| w * s).sum())
            .collect()
    }

    /// `ln(max(fb·spectrum, floor))` as `f32`.
    pub fn log_mel(&self, spectrum: &[f64], floor: f64) -> Vec<f32> {
        self.apply(spectrum)
            .into_iter()
            .map(|v| v.max(floor).ln() as f32)
            .collect()
    }
}

pub fn mel_spectrogram_with(w: &Waveform, config: &MelConfig) -> Result<MelSpectrogram> {
    let stft = Stft::new(config.clone());
    let mags = stft.magnitudes(w)?;
    let fb = MelFilterbank::new(w.sample_rate, config);
    let rows: Vec<Vec<f32>> = mags.iter().map(|m| fb.log_mel(m, config.log_floor)).collect();
    let frames = if rows.is_empty() {
        FeatureMatrix::zeros(0, config.n_mels)
    } else {
        FeatureMatrix::from_rows(&rows)?
    };
    Ok(MelSpectrogram {
        frames,
        sample_rate: w.sample_rate,
        hop: config.hop,
        win: config.win,
        n_fft: config.n_fft,
    })
}

/// 80-bin log-mel with the default framing.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    mel_spectrogram_with(w, &MelConfig::default())
}

pub const LOW_BAND_BINS: usize = 20;

/// The lowest 20 mel bins of every frame.
pub fn low_band(m: &MelSpectrogram) -> Result<FeatureMatrix> {
    if m.num_bins() < LOW_BAND_BINS {
        return Err(Error::invalid(
            "low_band",
            format!("need at least {LOW_BAND_BINS} mel bins, got {}", m.num_bins()),
        ));
    }
    m.frames.columns(0, LOW_BAND_BINS)
}

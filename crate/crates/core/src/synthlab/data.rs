use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiofeat::{FeatureMatrix, MelConfig, MelFilterbank, VuvFlags, LOW_BAND_BINS};
use crate::error::{Error, Result};

/// Sample rate the synthetic spectra pretend to come from.
pub const SYNTH_SAMPLE_RATE: u32 = 22_050;

/// F0 bases assigned to styles in order; further styles continue in 60 Hz steps.
pub const STYLE_F0_BASES: [f64; 4] = [120.0, 180.0, 240.0, 300.0];

const VOICED_SYMBOLS: usize = 8;
const UNVOICED_SYMBOLS: usize = 4;
/// Number of distinct frame-level content symbols.
pub const N_SYMBOLS: usize = VOICED_SYMBOLS + UNVOICED_SYMBOLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_styles: usize,
    pub n_contents: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Fraction of contents (rounded down, at least one) held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_styles: 4,
            n_contents: 10,
            min_frames: 40,
            max_frames: 80,
            eval_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synth_spec", msg));
        if self.n_styles == 0 || self.n_contents < 2 {
            return bad("need at least one style and two contents".into());
        }
        if self.min_frames < 10 || self.max_frames < self.min_frames {
            return bad(format!("frame range {}..={} is invalid", self.min_frames, self.max_frames));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction {} outside (0, 1)", self.eval_fraction));
        }
        Ok(())
    }

    pub fn n_eval_contents(&self) -> usize {
        ((self.n_contents as f64 * self.eval_fraction).floor() as usize).clamp(1, self.n_contents - 1)
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig::default()
    }
}

/// Per-style prosody parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub f0_base: f64,
    /// Relative vibrato depth (fraction of `f0_base`).
    pub vibrato_depth: f64,
    pub vibrato_rate: f64,
    /// Harmonic `h` has amplitude `h^-tilt`.
    pub tilt: f64,
}

/// Frame-level symbol sequence shared by all styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentSeq {
    pub ids: Vec<usize>,
}

pub fn is_voiced_symbol(id: usize) -> bool {
    id < VOICED_SYMBOLS
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub mel: FeatureMatrix,
    pub vuv: VuvFlags,
    pub content_ids: Vec<usize>,
    pub content_id: usize,
    pub style_id: usize,
    /// Ground-truth F0 in Hz, 0 on unvoiced frames.
    pub f0: Vec<f64>,
}

impl SynthSample {
    pub fn num_frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn low_band(&self) -> FeatureMatrix {
        self.mel.columns(0, LOW_BAND_BINS).expect("80 mel bins")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub styles: Vec<StyleParams>,
    pub train: Vec<SynthSample>,
    pub eval: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn all(&self) -> impl Iterator<Item = &SynthSample> {
        self.train.iter().chain(&self.eval)
    }
}

fn style_params(index: usize, rng: &mut ChaCha8Rng) -> StyleParams {
    let f0_base = STYLE_F0_BASES
        .get(index)
        .copied()
        .unwrap_or_else(|| STYLE_F0_BASES[3] + 60.0 * (index + 1 - STYLE_F0_BASES.len()) as f64);
    StyleParams {
        f0_base,
        vibrato_depth: rng.gen_range(0.01..0.04),
        vibrato_rate: rng.gen_range(4.0..7.0),
        tilt: rng.gen_range(1.2..1.6),
    }
}

fn content_sequence(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> ContentSeq {
    loop {
        let len = rng.gen_range(spec.min_frames..=spec.max_frames);
        let mut ids = Vec::with_capacity(len);
        let mut voiced = rng.gen_bool(0.5);
        while ids.len() < len {
            let sym = if voiced {
                rng.gen_range(0..VOICED_SYMBOLS)
            } else {
                VOICED_SYMBOLS + rng.gen_range(0..UNVOICED_SYMBOLS)
            };
            let dur = if voiced { rng.gen_range(5..=12) } else { rng.gen_range(3..=8) };
            ids.extend(std::iter::repeat_n(sym, dur.min(len - ids.len())));
            // Mostly alternate, occasionally chain two voiced segments.
            voiced = if voiced { rng.gen_bool(0.25) } else { true };
        }
        let v = ids.iter().filter(|&&s| is_voiced_symbol(s)).count() as f64 / len as f64;
        if (0.3..=0.8).contains(&v) {
            return ContentSeq { ids };
        }
    }
}

/// Formant centres (Hz) of voiced symbols and noise cut-offs of unvoiced ones.
fn symbol_shape(id: usize) -> (f64, f64) {
    if is_voiced_symbol(id) {
        let f1 = 500.0 + 55.0 * id as f64;
        let f2 = 1200.0 + 190.0 * ((id * 3) % VOICED_SYMBOLS) as f64;
        (f1, f2)
    } else {
        let k = (id - VOICED_SYMBOLS) as f64;
        (2500.0 + 900.0 * k, 600.0 + 150.0 * k)
    }
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Magnitude of the Hann window's transform at a fractional bin offset,
/// normalized to 1 at the peak.
fn hann_lobe(delta: f64) -> f64 {
    let sinc = |x: f64| if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
    (0.5 * sinc(delta) + 0.25 * sinc(delta - 1.0) + 0.25 * sinc(delta + 1.0)).abs()
}

struct FrameSynth {
    bins: usize,
    bin_hz: f64,
    fb: MelFilterbank,
    floor: f64,
}

impl FrameSynth {
    fn new(mel: &MelConfig) -> Self {
        Self {
            bins: mel.n_bins(),
            bin_hz: SYNTH_SAMPLE_RATE as f64 / mel.n_fft as f64,
            fb: MelFilterbank::new(SYNTH_SAMPLE_RATE, mel),
            floor: mel.log_floor,
        }
    }

    fn voiced(&self, f0: f64, tilt: f64, symbol: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (f1, f2) = symbol_shape(symbol);
        let mut spec = self.noise(0.02, 1.0, rng);
        let nyquist = SYNTH_SAMPLE_RATE as f64 / 2.0;
        let mut h = 1;
        while (h as f64) * f0 < nyquist.min(6000.0) {
            let f = h as f64 * f0;
            let formant = 1.0 + 0.8 * gauss(f, f1, 120.0) + 0.6 * gauss(f, f2, 250.0);
            let jitter = 1.0 + 0.05 * rng.gen_range(-1.0..1.0);
            let amp = 40.0 * (h as f64).powf(-tilt) * formant * jitter;
            let pos = f / self.bin_hz;
            let lo = (pos - 3.0).floor().max(0.0) as usize;
            let hi = ((pos + 3.0).ceil() as usize).min(self.bins - 1);
            for (k, s) in spec.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *s += amp * hann_lobe(k as f64 - pos);
            }
            h += 1;
        }
        spec
    }

    fn unvoiced(&self, symbol: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (cutoff, width) = symbol_shape(symbol);
        let mut spec = self.noise(0.02, 1.0, rng);
        for (k, s) in spec.iter_mut().enumerate() {
            let f = k as f64 * self.bin_hz;
            let shape = 1.0 / (1.0 + (-(f - cutoff) / width).exp());
            let z: f64 = StandardNormal.sample(rng);
            *s += 1.5 * shape * z.abs();
        }
        spec
    }

    /// Broadband background with a gentle high-frequency roll-off.
    fn noise(&self, level: f64, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.bins)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                level * (1.0 + 0.3 * spread * z).abs()
            })
            .collect()
    }

    fn log_mel(&self, spectrum: &[f64]) -> Vec<f32> {
        self.fb.log_mel(spectrum, self.floor)
    }
}

fn synth_sample(
    content: &ContentSeq,
    content_id: usize,
    style: &StyleParams,
    style_id: usize,
    synth: &FrameSynth,
    rng: &mut ChaCha8Rng,
) -> Result<SynthSample> {
    let t = content.ids.len();
    let frame_rate = SYNTH_SAMPLE_RATE as f64 / MelConfig::default().hop as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut rows = Vec::with_capacity(t);
    let mut f0 = Vec::with_capacity(t);
    let mut flags = Vec::with_capacity(t);
    for (i, &sym) in content.ids.iter().enumerate() {
        if is_voiced_symbol(sym) {
            let time = i as f64 / frame_rate;
            let hz = style.f0_base * (1.0 + style.vibrato_depth * (2.0 * PI * style.vibrato_rate * time + phase).sin());
            rows.push(synth.log_mel(&synth.voiced(hz, style.tilt, sym, rng)));
            f0.push(hz);
            flags.push(true);
        } else {
            rows.push(synth.log_mel(&synth.unvoiced(sym, rng)));
            f0.push(0.0);
            flags.push(false);
        }
    }
    Ok(SynthSample {
        mel: FeatureMatrix::from_rows(&rows)?,
        vuv: VuvFlags::new(flags),
        content_ids: content.ids.clone(),
        content_id,
        style_id,
        f0,
    })
}

/// Generates `n_styles × n_contents` samples. The last contents form the
/// evaluation split, so evaluation content is never seen in training.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles: Vec<StyleParams> = (0..spec.n_styles).map(|i| style_params(i, &mut rng)).collect();
    let contents: Vec<ContentSeq> = (0..spec.n_contents).map(|_| content_sequence(spec, &mut rng)).collect();
    let synth = FrameSynth::new(&spec.mel_config());
    let n_train = spec.n_contents - spec.n_eval_contents();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (c, content) in contents.iter().enumerate() {
        for (s, style) in styles.iter().enumerate() {
            let sample = synth_sample(content, c, style, s, &synth, &mut rng)?;
            if c < n_train {
                train.push(sample);
            } else {
                eval.push(sample);
            }
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        styles,
        train,
        eval,
    })
}

/// Low/high band energy ratio of a log-mel frame: bins `[0, 20)` against
/// the upper half.
pub fn band_energy_ratio(frame: &[f32]) -> f64 {
    let n = frame.len();
    let low: f64 = frame[..LOW_BAND_BINS.min(n)].iter().map(|&v| (v as f64).exp()).sum();
    let high: f64 = frame[n / 2..].iter().map(|&v| (v as f64).exp()).sum();
    low / high.max(1e-12)
}

/// Voicing re-estimated from a log-mel matrix (`ratio > 1.0` is voiced).
pub fn energy_ratio_vuv(mel: &FeatureMatrix) -> VuvFlags {
    VuvFlags::new(mel.iter_rows().map(|r| band_energy_ratio(r) > 1.0).collect())
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    split: String,
    content_id: usize,
    style_id: usize,
    frames: usize,
    mel: String,
    vuv: String,
    f0: Vec<f64>,
    content_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    spec: SynthSpec,
    styles: Vec<StyleParams>,
    samples: Vec<IndexEntry>,
}

const INDEX_FILE: &str = "index.json";

/// Writes `SFTR` mel/voicing files plus `index.json` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &SynthDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    for (split, list) in [("train", &ds.train), ("eval", &ds.eval)] {
        for s in list.iter() {
            let stem = format!("{split}_c{:02}_s{:02}", s.content_id, s.style_id);
            let (mel, vuv) = (format!("{stem}.mel.sftr"), format!("{stem}.vuv.sftr"));
            s.mel.save(dir.join(&mel))?;
            s.vuv.to_feature().save(dir.join(&vuv))?;
            samples.push(IndexEntry {
                split: split.to_string(),
                content_id: s.content_id,
                style_id: s.style_id,
                frames: s.num_frames(),
                mel,
                vuv,
                f0: s.f0.clone(),
                content_ids: s.content_ids.clone(),
            });
        }
    }
    let index = DatasetIndex {
        spec: ds.spec.clone(),
        styles: ds.styles.clone(),
        samples,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for e in index.samples {
        let mel = FeatureMatrix::load(dir.join(&e.mel))?;
        let vuv = VuvFlags::from_feature(&FeatureMatrix::load(dir.join(&e.vuv))?)?;
        if mel.rows() != e.frames || vuv.len() != e.frames || e.f0.len() != e.frames || e.content_ids.len() != e.frames
        {
            return Err(Error::Format {
                kind: "dataset index",
                msg: format!("frame counts disagree for {}", e.mel),
            });
        }
        let sample = SynthSample {
            mel,
            vuv,
            content_ids: e.content_ids,
            content_id: e.content_id,
            style_id: e.style_id,
            f0: e.f0,
        };
        match e.split.as_str() {
            "train" => train.push(sample),
            "eval" => eval.push(sample),
            other => {
                return Err(Error::Format {
                    kind: "dataset index",
                    msg: format!("unknown split `{other}`"),
                })
            }
        }
    }
    Ok(SynthDataset {
        spec: index.spec,
        styles: index.styles,
        train,
        eval,
    })
}

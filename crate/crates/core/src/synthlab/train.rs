use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{SynthDataset, SynthSample};
use super::metrics::{eval_metrics, Metrics};
use super::model::{ModelConfig, ToyModel};
use crate::diffcore::{AdamWConfig, AdamWState, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::objectives::{total_loss, LossReport, LossTerms, LossWeights};
use crate::quantizer::QuantMode;
use crate::styleenc::{AttentionMode, EncoderMode};

/// Ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    NoRt,
    NoRtUf,
    NoRtUfVe,
    NoSp,
    NoSpSd,
    BmAttention,
    PlainAttention,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Full,
        Mode::NoRt,
        Mode::NoRtUf,
        Mode::NoRtUfVe,
        Mode::NoSp,
        Mode::NoSpSd,
        Mode::BmAttention,
        Mode::PlainAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoRt => "no-rt",
            Mode::NoRtUf => "no-rt-uf",
            Mode::NoRtUfVe => "no-rt-uf-ve",
            Mode::NoSp => "no-sp",
            Mode::NoSpSd => "no-sp-sd",
            Mode::BmAttention => "bm-attention",
            Mode::PlainAttention => "plain-attention",
        }
    }

    /// Table label in the usual "− component" notation.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoRt => "−RT",
            Mode::NoRtUf => "−RT−UF",
            Mode::NoRtUfVe => "−RT−UF−VE",
            Mode::NoSp => "−SP",
            Mode::NoSpSd => "−SP−SD",
            Mode::BmAttention => "BM-attention",
            Mode::PlainAttention => "plain-attention",
        }
    }

    pub fn encoder_mode(self) -> EncoderMode {
        let full = EncoderMode::default();
        match self {
            Mode::Full | Mode::NoSp | Mode::NoSpSd => full,
            Mode::NoRt => EncoderMode {
                quant: QuantMode::Ste,
                ..full
            },
            Mode::NoRtUf => EncoderMode {
                quant: QuantMode::Ste,
                unvoiced_filler: false,
                ..full
            },
            Mode::NoRtUfVe => EncoderMode {
                quant: QuantMode::Ste,
                unvoiced_filler: false,
                voiced_extraction: false,
                ..full
            },
            Mode::BmAttention => EncoderMode {
                attention: AttentionMode::BinaryMask,
                ..full
            },
            Mode::PlainAttention => EncoderMode {
                attention: AttentionMode::Plain,
                ..full
            },
        }
    }

    /// `base` with the terms this mode drops zeroed.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Mode::NoSp => LossWeights { sp: 0.0, ..*base },
            Mode::NoSpSd => LossWeights {
                sp: 0.0,
                sd: 0.0,
                ..*base
            },
            _ => *base,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Metrics are evaluated at step 0, every `eval_every` steps and at the end.
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            eval_every: 50,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("train_config", "steps must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("train_config", "batch_size and eval_every must be positive"));
        }
        self.weights.validate()
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub mode: Mode,
    /// Report of the step that just ran; `None` before the first step.
    pub loss: Option<LossReport>,
    pub metrics: Metrics,
}

/// Model, parameters and optimizer state of one run.
pub struct Trainer {
    pub model: ToyModel,
    pub store: ParamStore<f32>,
    pub opt: AdamWState,
    pub mode: Mode,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = ToyModel::new(model_config, &mut store, &mut rng)?;
        Ok(Self {
            model,
            store,
            opt: AdamWState::new(config.optimizer.clone()),
            mode,
            config,
            rng,
        })
    }

    pub fn sample_batch<'a>(&mut self, train: &'a [SynthSample]) -> Vec<&'a SynthSample> {
        (0..self.config.batch_size)
            .map(|_| train.choose(&mut self.rng).expect("non-empty training set"))
            .collect()
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&SynthSample]) -> Result<LossReport> {
        train_step(&self.model, &mut self.store, &mut self.opt, batch, &self.config.weights, self.mode)
    }

    pub fn evaluate(&self, samples: &[SynthSample]) -> Result<Metrics> {
        eval_metrics(&self.model, &self.store, samples, &self.mode.encoder_mode())
    }
}

fn batch_mean(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Batch-mean losses, backward, AdamW. Dropped terms are still reported.
pub fn train_step(
    model: &ToyModel,
    store: &mut ParamStore<f32>,
    opt: &mut AdamWState,
    batch: &[&SynthSample],
    base_weights: &LossWeights,
    mode: Mode,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let enc_mode = mode.encoder_mode();
    let mut tape = Tape::<f32>::new();
    tape.bind_params(store);
    let (mut recon, mut rvq, mut sd, mut sp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in batch {
        let l = model.sample_losses(&mut tape, s, &enc_mode, None)?;
        recon.push(l.recon);
        rvq.extend(l.rvq);
        sd.push(l.sd);
        sp.push(l.sp);
    }
    let terms = LossTerms {
        recon: batch_mean(&mut tape, &recon)?,
        rvq: if rvq.is_empty() { None } else { Some(batch_mean(&mut tape, &rvq)?) },
        sd: Some(batch_mean(&mut tape, &sd)?),
        sp: Some(batch_mean(&mut tape, &sp)?),
    };
    let (total, report) = total_loss(&mut tape, terms, &mode.weights(base_weights))?;
    tape.backward(total)?;
    tape.write_param_grads(store);
    opt.step(store)?;
    Ok(report)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<MetricRecord>,
    pub losses: Vec<LossReport>,
}

/// Fits the model's input standardization on the training split, then runs
/// `config.steps` steps, evaluating on the eval split at step 0,
/// every `eval_every` steps and after the last step. `on_record` sees each
/// metric record as it is produced.
pub fn train_loop(
    dataset: &SynthDataset,
    model_config: ModelConfig,
    config: TrainConfig,
    mode: Mode,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::invalid("train_loop", "empty training split"));
    }
    let mut model_config = model_config;
    model_config.fit_input_stats(&dataset.train);
    let mut trainer = Trainer::new(model_config, config, mode)?;
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let record = |step: usize, loss: Option<LossReport>, trainer: &Trainer| -> Result<MetricRecord> {
        Ok(MetricRecord {
            step,
            mode,
            loss,
            metrics: trainer.evaluate(&dataset.eval)?,
        })
    };
    let first = record(0, None, &trainer)?;
    on_record(&first);
    history.push(first);
    let steps = trainer.config.steps;
    for step in 1..=steps {
        let batch = trainer.sample_batch(&dataset.train);
        let report = trainer.train_step(&batch)?;
        losses.push(report);
        if step % trainer.config.eval_every == 0 || step == steps {
            let r = record(step, Some(report), &trainer)?;
            on_record(&r);
            history.push(r);
        }
    }
    Ok(TrainOutcome {
        trainer,
        history,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub label: String,
    pub steps: usize,
    pub all_losses_finite: bool,
    pub final_total: f64,
    pub quant_error: f64,
    pub recon_l1: f64,
    pub orthogonality: f64,
    pub orthogonality_step0: f64,
    pub utilization: Vec<f64>,
    pub vuv_f1: f64,
    pub rmse_f0_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
    /// Oracle scores from scoring the references themselves.
    pub oracle: Metrics,
}

pub fn ablation_row(mode: Mode, outcome: &TrainOutcome) -> AblationRow {
    let last = outcome.history.last().expect("history has the step-0 record");
    let first = &outcome.history[0];
    AblationRow {
        mode,
        label: mode.label().to_string(),
        steps: outcome.losses.len(),
        all_losses_finite: outcome
            .losses
            .iter()
            .all(|r| [r.recon, r.rvq, r.sd, r.sp, r.total].iter().all(|v| v.is_finite())),
        final_total: outcome.losses.last().map_or(f64::NAN, |r| r.total),
        quant_error: last.metrics.quant_error,
        recon_l1: last.metrics.recon_l1,
        orthogonality: last.metrics.orthogonality,
        orthogonality_step0: first.metrics.orthogonality,
        utilization: last.metrics.utilization.clone(),
        vuv_f1: last.metrics.vuv_f1,
        rmse_f0_proxy: last.metrics.rmse_f0_proxy,
    }
}

/// Aligned-text rendering of an ablation report.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let header = [
        "mode", "quant_err", "recon_l1", "orth", "orth@0", "util(min)", "vuv_f1", "f0_proxy", "finite",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in &report.rows {
        let util = r.utilization.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(vec![
            r.label.clone(),
            format!("{:.4}", r.quant_error),
            format!("{:.4}", r.recon_l1),
            format!("{:.4}", r.orthogonality),
            format!("{:.4}", r.orthogonality_step0),
            format!("{util:.3}"),
            format!("{:.3}", r.vuv_f1),
            format!("{:.2}", r.rmse_f0_proxy),
            r.all_losses_finite.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Trains every mode in `modes` from the same seed and tabulates the
/// final metrics.
pub fn run_ablation(
    dataset: &SynthDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    modes: &[Mode],
) -> Result<AblationReport> {
    run_ablation_with(dataset, model_config, config, modes, |_| Ok(()))
}

/// [`run_ablation`], handing each finished run to `on_outcome`.
pub fn run_ablation_with(
    dataset: &SynthDataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    modes: &[Mode],
    mut on_outcome: impl FnMut(TrainOutcome) -> Result<()>,
) -> Result<AblationReport> {
    let refs: Vec<_> = dataset.eval.iter().map(|s| s.mel.clone()).collect();
    let oracle = super::metrics::reconstruction_metrics(&dataset.eval, &refs)?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let outcome = train_loop(dataset, model_config.clone(), config.clone(), mode, |_| {})?;
        rows.push(ablation_row(mode, &outcome));
        on_outcome(outcome)?;
    }
    Ok(AblationReport {
        seed: config.seed,
        steps: config.steps,
        rows,
        oracle,
    })
}

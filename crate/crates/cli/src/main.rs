use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use spotlight_core::audiofeat::{extract_all, load_wav, FeatureMatrix};
use spotlight_core::synthlab::{
    eval_metrics, generate_dataset, load_checkpoint, load_dataset, reconstruction_metrics, render_ablation_table,
    run_ablation, save_checkpoint, save_dataset, save_identity_oracle, train_loop, CheckpointKind, ModelConfig, Mode,
    SynthSpec, TrainConfig,
};
use spotlight_core::verify::{gradient_suite, GRADCHECK_TOL};

mod config;

use config::{seed_override, RunConfig};

/// Bad flags, configs or inputs. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification suite ran and found failures. Exits with status 1.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Parser)]
#[command(name = "spotlight", version, about = "Voiced-aware style encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log-mel, voicing, F0 and low-band features from a mono WAV.
    Featurize {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient verification suite.
    Gradcheck {
        #[arg(long, env = "SPOTLIGHT_SEED", default_value_t = 0)]
        seed: u64,
        /// Deliberately break the backward pass of one check.
        #[arg(long, hide = true)]
        corrupt_check: Option<String>,
    },
    /// Train the toy model on synthetic data.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `out` field of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the eval split of a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every ablation mode and tabulate the results.
    Ablate {
        #[arg(long, env = "SPOTLIGHT_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Write a synthetic dataset to a directory.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SPOTLIGHT_SEED", default_value_t = 7)]
        seed: u64,
    },
    /// Write the identity-copy oracle checkpoint.
    MakeOracle {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Featurize { wav, out } => featurize(&wav, &out),
        Command::Gradcheck { seed, corrupt_check } => gradcheck(seed, corrupt_check.as_deref()),
        Command::Train { config, out } => train(&config, out),
        Command::Eval { model, data } => eval(&model, &data),
        Command::Ablate { seed, steps, out } => ablate(seed, steps, &out),
        Command::MakeData { out, seed } => {
            let spec = SynthSpec {
                seed,
                ..SynthSpec::default()
            };
            let ds = generate_dataset(&spec)?;
            save_dataset(&out, &ds)?;
            println!("wrote {} samples to {}", ds.train.len() + ds.eval.len(), out.display());
            Ok(())
        }
        Command::MakeOracle { out } => {
            save_identity_oracle(&out, ModelConfig::lab(), 0)?;
            println!("wrote identity oracle to {}", out.display());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct FeatureSidecar {
    source: String,
    sample_rate: u32,
    frames: usize,
    hop: usize,
    win: usize,
    n_fft: usize,
    mel_bins: usize,
    low_band_bins: usize,
    voiced_frames: usize,
    files: [&'static str; 4],
}

fn featurize(wav: &Path, out: &Path) -> Result<()> {
    let wave = load_wav(wav).map_err(|e| UsageError(format!("{}: {e}", wav.display())))?;
    let feats = extract_all(&wave).map_err(|e| UsageError(format!("{}: {e}", wav.display())))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let frames = feats.mel.frames.rows();
    let f0 = FeatureMatrix::new(frames, 1, feats.pitch.f0.iter().map(|&v| v as f32).collect())?;
    feats.mel.frames.save(out.join("mel.sftr"))?;
    feats.vuv.to_feature().save(out.join("vuv.sftr"))?;
    f0.save(out.join("f0.sftr"))?;
    feats.low_band.save(out.join("lowband.sftr"))?;
    let sidecar = FeatureSidecar {
        source: wav.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sample_rate: feats.mel.sample_rate,
        frames,
        hop: feats.mel.hop,
        win: feats.mel.win,
        n_fft: feats.mel.n_fft,
        mel_bins: feats.mel.frames.cols(),
        low_band_bins: feats.low_band.cols(),
        voiced_frames: feats.vuv.voiced_count(),
        files: ["mel.sftr", "vuv.sftr", "f0.sftr", "lowband.sftr"],
    };
    fs::write(out.join("features.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!("{frames} frames ({} voiced) -> {}", sidecar.voiced_frames, out.display());
    Ok(())
}

fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<()> {
    let results = gradient_suite(seed, corrupt).map_err(|e| UsageError(e.to_string()))?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} max_rel_err {:>10.3e}  {status}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {GRADCHECK_TOL:e}", results.len());
        Ok(())
    } else {
        Err(VerificationFailed(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}

#[derive(Serialize)]
struct StepLog<'a> {
    step: usize,
    mode: Mode,
    loss: &'a spotlight_core::objectives::LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<&'a spotlight_core::synthlab::Metrics>,
}

fn train(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out = out;
    }
    let dataset = generate_dataset(&config.data)?;
    let outcome = train_loop(&dataset, config.model_config(), config.train_config(), config.mode, |r| {
        eprintln!(
            "step {:>5}  recon_l1 {:.4}  orth {:.4}",
            r.step, r.metrics.recon_l1, r.metrics.orthogonality
        );
    })?;

    let out = &config.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    fs::write(
        out.join("baseline.json"),
        serde_json::to_string_pretty(&outcome.history[0])? + "\n",
    )?;
    // One line per optimizer step; evaluated steps carry their metrics.
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("metrics.ndjson"))?);
    for (i, loss) in outcome.losses.iter().enumerate() {
        let step = i + 1;
        let metrics = outcome.history.iter().find(|r| r.step == step).map(|r| &r.metrics);
        let line = StepLog {
            step,
            mode: config.mode,
            loss,
            metrics,
        };
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
    }
    log.flush()?;
    let t = &outcome.trainer;
    save_checkpoint(out.join("checkpoint"), &t.model, &t.store, config.mode, config.steps, config.seed)?;
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn eval(model: &Path, data: &Path) -> Result<()> {
    let ck = load_checkpoint(model).map_err(|e| UsageError(format!("{}: {e}", model.display())))?;
    let ds = load_dataset(data).map_err(|e| UsageError(format!("{}: {e}", data.display())))?;
    let metrics = match (ck.manifest.kind, &ck.model) {
        (CheckpointKind::IdentityOracle, _) => {
            let refs: Vec<_> = ds.eval.iter().map(|s| s.mel.clone()).collect();
            reconstruction_metrics(&ds.eval, &refs)?
        }
        (CheckpointKind::Model, Some(m)) => eval_metrics(m, &ck.store, &ds.eval, &ck.manifest.mode.encoder_mode())?,
        (CheckpointKind::Model, None) => unreachable!("model checkpoints always load a model"),
    };
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn ablate(seed: u64, steps: usize, out: &Path) -> Result<()> {
    let dataset = generate_dataset(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })?;
    let config = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let report = run_ablation(&dataset, &ModelConfig::lab(), &config, &Mode::ALL)?;
    let table = render_ablation_table(&report);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

//! Acceptance criteria, one test per criterion. Each test prints a single
//! `PASS`/`FAIL` line to stderr (outside the test harness capture) before
//! asserting.
//!
//! Criteria 8 to 10 share one training session: the 8-mode ablation at
//! 500 steps, after which the full-mode run continues to 2000 steps for the
//! transfer evaluation. The first of those tests to run pays for it.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use spotlight_core::audiofeat::{estimate_f0_vuv, mel_spectrogram, stft_magnitude, MelConfig, MelFilterbank, Waveform};
use spotlight_core::diffcore::{ParamStore, Tape, Tensor};
use spotlight_core::objectives::{sd_loss_with, sp_loss_projected, total_loss, LossTerms, LossWeights, SdNormalization};
use spotlight_core::quantizer::{
    nearest_code, quantize_rt, quantize_ste, rotation_align, rvq_forward, rvq_loss, Codebook, QuantMode,
};
use spotlight_core::styleenc::{biased_self_attention_traced, AttentionMode, AttentionWeights};
use spotlight_core::synthlab::{
    generate_dataset, run_ablation_with, transfer_eval, AblationReport, AblationRow, MetricRecord, ModelConfig, Mode,
    SynthSpec, TrainConfig, TransferReport,
};
use spotlight_core::verify::gradient_suite;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[criterion {criterion:>2}] {status}  {title}: {detail}");
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn criterion_01_rotation_trick_forward_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=32);
        let t = rng.gen_range(1..=4);
        let e = gaussian(&[t, d], 1.0, &mut rng).cast::<f32>();
        let cb = gaussian(&[k, d], 1.0, &mut rng).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let (ev, cv) = (tape.constant(e), tape.constant(cb));
        let rt = quantize_rt(&mut tape, ev, cv).unwrap();
        let ste = quantize_ste(&mut tape, ev, cv).unwrap();
        assert_eq!(rt.indices, ste.indices);
        let (a, b) = (tape.value(rt.output).data(), tape.value(ste.output).data());
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(5);
    report(1, "RT forward equals STE forward", pass, &format!("max diff {worst:.2e} over 1000 draws in {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_02_rotation_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut align, mut iso) = (0.0f64, 0.0f64);
    let random_vec = |rng: &mut ChaCha8Rng| gaussian(&[16], 1.0, rng).data().to_vec();
    for i in 0..100 {
        let e = random_vec(&mut rng);
        // Every tenth pair is antiparallel to exercise the reflection fallback.
        let q: Vec<f64> = if i % 10 == 0 {
            e.iter().map(|v| -2.5 * v).collect()
        } else {
            random_vec(&mut rng)
        };
        let r = rotation_align(&e, &q).unwrap();
        let got = r.apply(&unit(&e));
        let want = unit(&q);
        align = align.max(norm(&got.iter().zip(&want).map(|(a, b)| a - b).collect::<Vec<_>>()));
        let x = random_vec(&mut rng);
        iso = iso.max((norm(&r.apply(&x)) - norm(&x)).abs() / norm(&x));
    }
    let elapsed = start.elapsed();
    let pass = align < 1e-5 && iso < 1e-5 && elapsed < Duration::from_secs(1);
    report(
        2,
        "rotation aligns and preserves norms",
        pass,
        &format!("max ‖Rê−q̂‖ {align:.2e}, max rel norm change {iso:.2e} in {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let results = gradient_suite(0, None).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let content_leak = results.iter().find(|r| r.name == "sd_loss_content_zero").unwrap().max_rel_error;
    let failing: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let pass = failing.is_empty() && content_leak == 0.0 && elapsed < Duration::from_secs(60);
    report(
        3,
        "gradient suite",
        pass,
        &format!(
            "{} checks, worst {} at {:.2e}, sd content grad {content_leak}, failing {failing:?}, {elapsed:.2?}",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_quantizer_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cb = Codebook::<f32>::random(128, 16, &mut rng).unwrap();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let q = gaussian(&[16], 1.0, &mut rng).cast::<f32>();
        let (idx, _) = nearest_code(&cb, q.data()).unwrap();
        let oracle = (0..cb.size())
            .map(|k| {
                let d: f64 = cb
                    .code(k)
                    .iter()
                    .zip(q.data())
                    .map(|(&c, &x)| (c as f64 - x as f64).powi(2))
                    .sum();
                (k, d)
            })
            .fold((usize::MAX, f64::INFINITY), |best, (k, d)| if d < best.1 { (k, d) } else { best });
        if idx != oracle.0 {
            mismatches += 1;
        }
    }

    let mut monotone_fail = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let e = gaussian(&[16, 32], 1.0, &mut rng);
        let cbs: Vec<Tensor<f64>> = (0..4).map(|_| gaussian(&[32, 32], 32f64.sqrt().recip(), &mut rng)).collect();
        let mut tape = Tape::<f64>::new();
        let ev = tape.constant(e);
        let cvs: Vec<_> = cbs.into_iter().map(|c| tape.constant(c)).collect();
        let out = rvq_forward(&mut tape, &cvs, ev, QuantMode::Rt, 0.25, None).unwrap();
        if !out.residual_norms.windows(2).all(|w| w[1] <= w[0]) {
            monotone_fail += 1;
        }
    }

    // Depth-2 hand fixture: e = [[1,0],[0,2]]; layer 0 leaves residuals
    // [0,0] and [0,1]; layer 1 picks [0,0.5] for both. Per-layer mean
    // squared errors are 1/4 and 1/8, so the loss is (1 + 0.25)·0.375.
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
    let c0 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let c1 = tape.constant(Tensor::from_rows(&[vec![0.0, 0.5], vec![3.0, 3.0]]).unwrap());
    let out = rvq_forward(&mut tape, &[c0, c1], e, QuantMode::Rt, 0.25, None).unwrap();
    let loss = rvq_loss(&mut tape, &out).unwrap();
    let fixture_err = (tape.item(loss) - 0.46875).abs();

    let pass = mismatches == 0 && monotone_fail == 0 && fixture_err < 1e-5;
    report(
        4,
        "quantizer oracles",
        pass,
        &format!(
            "{mismatches}/1000 nearest-code mismatches, {monotone_fail}/100 non-monotone batches, fixture error {fixture_err:.1e}"
        ),
    );
    assert!(pass);
}

fn attention_setup(dim: usize, seed: u64) -> (AttentionWeights, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let w = AttentionWeights::new(&mut store, "a", dim, &mut rng).unwrap();
    (w, store.cast())
}

fn two_frame_oracle(x: [[f64; 2]; 2], beta: [f64; 2]) -> Vec<f64> {
    let s = 0.5f64.sqrt();
    let mut out = Vec::new();
    for xi in &x {
        let l: Vec<f64> = x.iter().zip(beta).map(|(xj, b)| (xi[0] * xj[0] + xi[1] * xj[1]) * s * b).collect();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        for c in 0..2 {
            out.push(l[0].exp() / z * x[0][c] + l[1].exp() / z * x[1][c] + xi[c]);
        }
    }
    out
}

#[test]
fn criterion_05_attention_contracts() {
    let (w, store) = attention_setup(8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = gaussian(&[7, 8], 1.0, &mut rng);
    let mask = [false, true, true, false, true, false, false];

    let run = |beta: f64, mode: AttentionMode, heads: usize| {
        let mut tape = Tape::<f64>::new();
        tape.bind_params(&store);
        let xv = tape.constant(x.clone());
        let (y, trace) = biased_self_attention_traced(&mut tape, xv, &w, &mask, beta, heads, mode).unwrap();
        let logits: Vec<Tensor<f64>> = trace.logits.iter().map(|&v| tape.value(v).clone()).collect();
        let probs: Vec<Tensor<f64>> = trace.probs.iter().map(|&v| tape.value(v).clone()).collect();
        (tape.value(y).clone(), logits, probs)
    };

    let mut plain_diff = 0.0f64;
    for heads in [1, 2] {
        let (a, _, _) = run(1.0, AttentionMode::Reweight, heads);
        let (b, _, _) = run(1.0, AttentionMode::Plain, heads);
        plain_diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(plain_diff, f64::max);
    }

    let (_, _, probs) = run(0.02, AttentionMode::Reweight, 2);
    let row_sum_err = probs
        .iter()
        .flat_map(|p| (0..p.rows()).map(move |i| (p.row(i).iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);

    let (_, logits, _) = run(0.02, AttentionMode::BinaryMask, 1);
    let bm_exact = logits
        .iter()
        .all(|l| (0..l.rows()).all(|i| mask.iter().enumerate().all(|(j, &m)| !m || l.row(i)[j] == 0.0)));

    let (w2, mut store2) = attention_setup(2, 6);
    for name in ["a.q.w", "a.k.w", "a.v.w"] {
        store2.set(name, Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
    }
    let xr = [[1.0, 0.0], [0.5, 1.0]];
    let mut tape = Tape::<f64>::new();
    tape.bind_params(&store2);
    let xv = tape.constant(Tensor::from_rows(&[xr[0].to_vec(), xr[1].to_vec()]).unwrap());
    let (y, _) =
        biased_self_attention_traced(&mut tape, xv, &w2, &[false, true], 0.02, 1, AttentionMode::Reweight).unwrap();
    let want = two_frame_oracle(xr, [1.0, 0.02]);
    let hand_err = tape.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let pass = plain_diff < 1e-6 && hand_err < 1e-5 && row_sum_err < 1e-6 && bm_exact;
    report(
        5,
        "attention contracts",
        pass,
        &format!(
            "β=1 vs plain {plain_diff:.1e}, 2-frame oracle {hand_err:.1e}, row sums {row_sum_err:.1e}, BM masked logits exactly 0: {bm_exact}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_loss_fixtures() {
    let scalar = |tape: &mut Tape<f64>, rows: &[Vec<f64>]| tape.constant(Tensor::from_rows(rows).unwrap());
    let sd = |c: &[Vec<f64>], s: &[Vec<f64>], norm: SdNormalization| {
        let mut tape = Tape::new();
        let (cv, sv) = (scalar(&mut tape, c), scalar(&mut tape, s));
        let l = sd_loss_with(&mut tape, cv, sv, norm).unwrap();
        tape.item(l)
    };
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let orth_c = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
    let orth_s = vec![vec![0.0, 3.0, 0.0], vec![0.0, 0.0, -1.0]];
    let sd_orth = sd(&orth_c, &orth_s, SdNormalization::PerFrame);
    let sd_eye = sd(&eye, &eye, SdNormalization::PerFrame);
    let sd_raw = sd(&eye, &eye, SdNormalization::Raw);

    let sp = |s: &[Vec<f64>], p: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let (sv, pv) = (scalar(&mut tape, s), scalar(&mut tape, p));
        let l = sp_loss_projected(&mut tape, sv, pv).unwrap();
        tape.item(l)
    };
    let aligned = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![4.0, 0.0]];
    let scaled: Vec<Vec<f64>> = aligned.iter().map(|r| r.iter().map(|v| 3.0 * v).collect()).collect();
    let rotated: Vec<Vec<f64>> = aligned.iter().map(|r| vec![-r[1], r[0]]).collect();
    let sp_aligned = sp(&aligned, &scaled);
    let sp_orth = sp(&aligned, &rotated);

    let mut tape = Tape::<f64>::new();
    let one = |tape: &mut Tape<f64>| tape.constant(Tensor::scalar(1.0));
    let terms = LossTerms {
        recon: one(&mut tape),
        rvq: Some(one(&mut tape)),
        sd: Some(one(&mut tape)),
        sp: Some(one(&mut tape)),
    };
    let (total, _) = total_loss(&mut tape, terms, &LossWeights::default()).unwrap();
    let total = tape.item(total);

    let pass = sd_orth == 0.0
        && (sd_eye - 0.5).abs() < 1e-12
        && (sd_raw - 2.0).abs() < 1e-12
        && (sp_aligned + 3.0).abs() < 1e-6
        && sp_orth.abs() < 1e-12
        && (total - 2.04).abs() < 1e-12;
    report(
        6,
        "loss fixtures",
        pass,
        &format!(
            "sd orth {sd_orth}, sd identity {sd_eye} (raw {sd_raw}), sp aligned {sp_aligned:.6} (T=3), sp orth {sp_orth}, total {total}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_audio_pipeline() {
    let start = Instant::now();
    let sr = 22050;
    let tone = Waveform::new(
        (0..sr as usize)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / sr as f64).sin())
            .collect(),
        sr,
    );
    let (pitch, vuv) = estimate_f0_vuv(&tone).unwrap();
    let voiced_all = vuv.flags.iter().all(|&v| v);
    let f0_err = pitch
        .f0
        .iter()
        .zip(&vuv.flags)
        .filter(|(_, &v)| v)
        .map(|(f, _)| (f - 220.0).abs())
        .fold(0.0, f64::max);

    let silence = Waveform::new(vec![0.0; sr as usize], sr);
    let (_, svuv) = estimate_f0_vuv(&silence).unwrap();
    let unvoiced_all = svuv.flags.iter().all(|&v| !v);

    let config = MelConfig::default();
    let analytic_bin = (220.0 * config.n_fft as f64 / sr as f64).round() as usize;
    let argmax = |row: &[f32]| (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let stft = stft_magnitude(&tone).unwrap();
    let stft_ok = stft.iter_rows().all(|r| argmax(r) == analytic_bin);
    // Mel argmax should be the filter that weights the tone's bin most.
    let fb = MelFilterbank::new(sr, &config);
    let analytic_mel = (0..fb.n_mels())
        .max_by(|&a, &b| fb.weights(a)[analytic_bin].total_cmp(&fb.weights(b)[analytic_bin]))
        .unwrap();
    let mel = mel_spectrogram(&tone).unwrap();
    let mel_ok = mel.frames.iter_rows().all(|r| argmax(r) == analytic_mel);
    let elapsed = start.elapsed();

    let pass = voiced_all && f0_err < 3.0 && unvoiced_all && stft_ok && mel_ok && elapsed < Duration::from_secs(5);
    report(
        7,
        "audio pipeline",
        pass,
        &format!(
            "tone voiced {voiced_all}, max |f0−220| {f0_err:.3} Hz, silence unvoiced {unvoiced_all}, \
             STFT bin {analytic_bin} {stft_ok}, mel bin {analytic_mel} {mel_ok}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

const TRANSFER_STEPS: usize = 2000;

struct ToyRun {
    ablation: AblationReport,
    full_history: Vec<MetricRecord>,
    transfer: TransferReport,
    train_time: Duration,
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let dataset = generate_dataset(&SynthSpec::default()).unwrap();
        let config = TrainConfig::default();
        let mut full = None;
        let ablation = run_ablation_with(&dataset, &ModelConfig::lab(), &config, &Mode::ALL, |outcome| {
            if outcome.trainer.mode == Mode::Full {
                full = Some(outcome);
            }
            Ok(())
        })
        .unwrap();
        let mut full = full.expect("full mode is part of the matrix");
        for _ in config.steps..TRANSFER_STEPS {
            let batch = full.trainer.sample_batch(&dataset.train);
            full.trainer.train_step(&batch).unwrap();
        }
        let t = &full.trainer;
        let transfer = transfer_eval(&t.model, &t.store, &dataset, &t.mode.encoder_mode()).unwrap();
        ToyRun {
            ablation,
            full_history: full.history,
            transfer,
            train_time: start.elapsed(),
        }
    })
}

fn row(mode: Mode) -> &'static AblationRow {
    toy_run().ablation.rows.iter().find(|r| r.mode == mode).unwrap()
}

/// Numbers from the first verified run of criterion 8.
#[derive(Debug, Serialize, Deserialize)]
struct ToyFixture {
    recon_initial: f64,
    recon_final: f64,
    orthogonality_initial: f64,
    orthogonality_final: f64,
    no_sp_sd_orthogonality_final: f64,
    utilization: Vec<f64>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_seed7.json")
}

#[test]
fn criterion_08_toy_disentanglement() {
    let run = toy_run();
    let first = &run.full_history[0].metrics;
    let full = row(Mode::Full);
    let ablated = row(Mode::NoSpSd);
    let a = full.recon_l1 < 0.5 * first.recon_l1;
    let b = full.orthogonality < 0.5 * full.orthogonality_step0;
    let c = ablated.orthogonality >= 0.5 * ablated.orthogonality_step0;
    let d = full.utilization.iter().all(|&u| u >= 0.2);

    let observed = ToyFixture {
        recon_initial: first.recon_l1,
        recon_final: full.recon_l1,
        orthogonality_initial: full.orthogonality_step0,
        orthogonality_final: full.orthogonality,
        no_sp_sd_orthogonality_final: ablated.orthogonality,
        utilization: full.utilization.clone(),
    };
    let path = fixture_path();
    if std::env::var_os("SPOTLIGHT_BLESS").is_some() && a && b && c && d {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&observed).unwrap() + "\n").unwrap();
    }
    let fixture: ToyFixture = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 0.1 * y.abs().max(1e-3);
    let regression = close(observed.recon_final, fixture.recon_final)
        && close(observed.recon_initial, fixture.recon_initial)
        && close(observed.orthogonality_initial, fixture.orthogonality_initial)
        && observed.utilization.iter().zip(&fixture.utilization).all(|(u, f)| (u - f).abs() <= 0.05);

    let pass = a && b && c && d && regression;
    report(
        8,
        "toy disentanglement (seed 7, 500 steps)",
        pass,
        &format!(
            "(a) recon {:.3} -> {:.3} {a}; (b) orth {:.4} -> {:.4} {b}; (c) −SP−SD orth {:.4} -> {:.4} fails bound {c}; \
             (d) utilization {:?} {d}; matches fixture {regression}",
            first.recon_l1,
            full.recon_l1,
            full.orthogonality_step0,
            full.orthogonality,
            ablated.orthogonality_step0,
            ablated.orthogonality,
            full.utilization,
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_toy_style_transfer() {
    let run = toy_run();
    let rate = run.transfer.success_rate;
    let pass = rate >= 0.7;
    report(
        9,
        "toy style transfer (2000 steps)",
        pass,
        &format!(
            "{:.1}% of {} cross pairs closer to the reference style",
            100.0 * rate,
            run.transfer.pairs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_ablation_matrix() {
    let run = toy_run();
    let rows = &run.ablation.rows;
    let complete = rows.len() == 8
        && Mode::ALL.iter().all(|m| rows.iter().any(|r| r.mode == *m))
        && rows.iter().all(|r| r.steps == 500);
    let finite = rows.iter().all(|r| r.all_losses_finite);
    let fields = rows.iter().all(|r| {
        r.quant_error.is_finite()
            && r.recon_l1.is_finite()
            && r.orthogonality.is_finite()
            && r.utilization.len() == 4
            && r.utilization.iter().all(|u| u.is_finite())
    });
    let json = serde_json::to_value(&run.ablation).unwrap();
    let keys = json["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| ["quant_error", "recon_l1", "orthogonality", "utilization"].iter().all(|k| r.get(k).is_some()));
    let (rt, ste) = (row(Mode::Full).quant_error, row(Mode::NoRt).quant_error);

    let table = spotlight_core::synthlab::render_ablation_table(&run.ablation);
    let _ = writeln!(std::io::stderr().lock(), "{table}");
    let pass = complete && finite && fields && keys;
    report(
        10,
        "ablation smoke matrix",
        pass,
        &format!(
            "8 modes complete {complete}, finite losses {finite}, report fields {}; quant error RT {rt:.3} vs STE {ste:.3} \
             (RT ≤ STE: {}); total training {:.0?}",
            fields && keys,
            rt <= ste,
            run.train_time
        ),
    );
    assert!(pass);
}

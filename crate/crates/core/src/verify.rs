//! The gradient verification suite behind `spotlight gradcheck`.
//!
//! Every differentiable primitive of the tape, the quantizer backward
//! rules, both auxiliary losses and one full style-encoder graph are
//! compared against central differences in `f64`. Each check reports the
//! largest relative error it saw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audiofeat::VuvFlags;
use crate::diffcore::{
    grad_check_many, grad_check_params, max_relative_error, numeric_gradient, ConvMode, CustomOp, Element,
    ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::objectives::{sd_loss, sp_loss, MlpHead};
use crate::quantizer::{quantize_rt, quantize_ste, rvq_forward, rvq_loss, QuantMode, RvqTrace};
use crate::styleenc::{EncoderMode, StyleEncoder, StyleEncoderConfig};

/// A check passes when its max relative error is below this.
pub const GRADCHECK_TOL: f64 = 1e-3;

const H: f64 = 1e-6;
const PARAM_H: f64 = 1e-5;
const PARAM_FLOOR: f64 = 1e-6;
const PROBES_PER_PARAM: usize = 8;

/// Names of all checks, in the order the suite runs them.
pub const CHECK_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "square",
    "abs",
    "gelu",
    "matmul",
    "transpose",
    "add_row",
    "softmax",
    "layer_norm",
    "conv1d_pointwise",
    "conv1d_depthwise7",
    "sum",
    "mean",
    "mean_rows",
    "gather_rows",
    "scatter_rows",
    "slice_cols",
    "concat_cols",
    "row_cosine",
    "detach",
    "rt_backward",
    "ste_backward",
    "rvq_loss",
    "sd_loss",
    "sd_loss_content_zero",
    "sp_loss",
    "encode_style",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Identity in the forward pass; multiplies the incoming gradient by 1.5.
struct ScaledBackward;

impl<F: Element> CustomOp<F> for ScaledBackward {
    fn name(&self) -> &'static str {
        "scaled_backward"
    }

    fn backward(&self, _inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>> {
        vec![Some(grad.iter().map(|&g| g * F::of(1.5)).collect())]
    }
}

#[derive(Clone, Copy)]
struct Hook(bool);

impl Hook {
    fn finish(self, tape: &mut Tape<f64>, loss: Var) -> Var {
        if !self.0 {
            return loss;
        }
        let value = tape.value(loss).clone();
        tape.custom(&[loss], value, Box::new(ScaledBackward))
    }
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ y ⊙ w` for a fixed random `w`, so no gradient is trivially uniform.
fn weighted(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

struct Suite {
    rng: ChaCha8Rng,
    corrupt: Option<&'static str>,
    results: Vec<CheckResult>,
}

impl Suite {
    fn hook(&self, name: &str) -> Hook {
        Hook(self.corrupt == Some(name))
    }

    fn record(&mut self, name: &'static str, err: f64) {
        self.results.push(CheckResult {
            name,
            max_rel_error: err,
        });
    }

    /// Checks `f` with respect to fresh Gaussian inputs of the given shapes.
    /// The scalar output is `Σ f(x) ⊙ w` for a random `w`.
    fn primitive<G>(&mut self, name: &'static str, shapes: &[&[usize]], shift: bool, f: G) -> Result<()>
    where
        G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| gaussian(s, &mut self.rng)).collect();
        if shift {
            // Keep away from kinks at zero.
            for t in &mut inputs {
                for v in t.data_mut() {
                    *v += 0.3 * v.signum();
                }
            }
        }
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = f(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let w = gaussian(&probe, &mut self.rng);
        let hook = self.hook(name);
        let report = grad_check_many(
            |tape, vars| {
                let y = f(tape, vars)?;
                let loss = weighted(tape, y, &w)?;
                Ok(hook.finish(tape, loss))
            },
            &inputs,
            H,
        )?;
        self.record(name, report.max_rel_error);
        Ok(())
    }
}

/// Runs every check. `corrupt` names one check whose backward pass is
/// deliberately scaled, to confirm that the harness catches errors.
pub fn gradient_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let corrupt = match corrupt {
        None => None,
        Some(name) => Some(
            *CHECK_NAMES
                .iter()
                .find(|&&n| n == name)
                .ok_or_else(|| Error::invalid("gradient_suite", format!("unknown check `{name}`")))?,
        ),
    };
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        corrupt,
        results: Vec::with_capacity(CHECK_NAMES.len()),
    };
    primitives(&mut s)?;
    quantizer_checks(&mut s)?;
    loss_checks(&mut s)?;
    encode_check(&mut s)?;
    debug_assert_eq!(s.results.iter().map(|r| r.name).collect::<Vec<_>>(), CHECK_NAMES);
    Ok(s.results)
}

fn primitives(s: &mut Suite) -> Result<()> {
    s.primitive("add", &[&[3, 4], &[3, 4]], false, |t, v| t.add(v[0], v[1]))?;
    s.primitive("sub", &[&[3, 4], &[3, 4]], false, |t, v| t.sub(v[0], v[1]))?;
    s.primitive("mul", &[&[3, 4], &[3, 4]], false, |t, v| t.mul(v[0], v[1]))?;
    s.primitive("scale", &[&[3, 4]], false, |t, v| Ok(t.scale(v[0], -1.7)))?;
    s.primitive("neg", &[&[3, 4]], false, |t, v| Ok(t.neg(v[0])))?;
    s.primitive("square", &[&[3, 4]], false, |t, v| Ok(t.square(v[0])))?;
    s.primitive("abs", &[&[3, 4]], true, |t, v| Ok(t.abs(v[0])))?;
    s.primitive("gelu", &[&[3, 4]], false, |t, v| Ok(t.gelu(v[0])))?;
    s.primitive("matmul", &[&[3, 5], &[5, 2]], false, |t, v| t.matmul(v[0], v[1]))?;
    s.primitive("transpose", &[&[3, 5]], false, |t, v| t.transpose(v[0]))?;
    s.primitive("add_row", &[&[4, 3], &[3]], false, |t, v| t.add_row(v[0], v[1]))?;
    s.primitive("softmax", &[&[3, 5]], false, |t, v| t.softmax(v[0]))?;
    s.primitive("layer_norm", &[&[4, 6], &[6], &[6]], false, |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    })?;
    s.primitive("conv1d_pointwise", &[&[5, 3], &[3, 4]], false, |t, v| {
        t.conv1d(v[0], v[1], ConvMode::Pointwise)
    })?;
    s.primitive("conv1d_depthwise7", &[&[9, 3], &[7, 3]], false, |t, v| {
        t.conv1d(v[0], v[1], ConvMode::Depthwise7)
    })?;
    s.primitive("sum", &[&[3, 4]], false, |t, v| Ok(t.sum(v[0])))?;
    s.primitive("mean", &[&[3, 4]], false, |t, v| Ok(t.mean(v[0])))?;
    s.primitive("mean_rows", &[&[5, 3]], false, |t, v| t.mean_rows(v[0]))?;
    s.primitive("gather_rows", &[&[4, 3]], false, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))?;
    s.primitive("scatter_rows", &[&[3, 4], &[4]], false, |t, v| {
        t.scatter_rows(v[0], v[1], &[0, 2, 5], 6)
    })?;
    s.primitive("slice_cols", &[&[3, 6]], false, |t, v| t.slice_cols(v[0], 2, 3))?;
    s.primitive("concat_cols", &[&[3, 2], &[3, 4]], false, |t, v| t.concat_cols(&[v[0], v[1]]))?;
    s.primitive("row_cosine", &[&[4, 5], &[4, 5]], false, |t, v| t.row_cosine(v[0], v[1]))?;
    detach_check(s)
}

/// `f(x) = Σ w ⊙ x ⊙ sg[x]`: the stop-gradient side is pinned to the
/// evaluation point, so the numeric derivative sees `w ⊙ x₀`.
fn detach_check(s: &mut Suite) -> Result<()> {
    let x = gaussian(&[3, 4], &mut s.rng);
    let w = gaussian(&[3, 4], &mut s.rng);
    let hook = s.hook("detach");
    let pinned = vec![x.clone()];
    let report = grad_check_many(
        |tape, v| {
            tape.pin_detached(pinned.clone());
            let d = tape.detach(v[0]);
            let y = tape.mul(v[0], d)?;
            let loss = weighted(tape, y, &w)?;
            Ok(hook.finish(tape, loss))
        },
        std::slice::from_ref(&x),
        H,
    )?;
    s.record("detach", report.max_rel_error);
    Ok(())
}

fn quantizer_checks(s: &mut Suite) -> Result<()> {
    // Numeric side: the output as a function of `e` with every row map
    // frozen at the evaluation point.
    for (name, rt) in [("rt_backward", true), ("ste_backward", false)] {
        let e = gaussian(&[6, 8], &mut s.rng);
        let cb = gaussian(&[16, 8], &mut s.rng);
        let w = gaussian(&[6, 8], &mut s.rng);
        let mut tape = Tape::new();
        let ev = tape.leaf(e.clone().with_grad());
        let cv = tape.constant(cb);
        let q = if rt {
            quantize_rt(&mut tape, ev, cv)?
        } else {
            quantize_ste(&mut tape, ev, cv)?
        };
        let loss = weighted(&mut tape, q.output, &w)?;
        let loss = s.hook(name).finish(&mut tape, loss);
        tape.backward(loss)?;
        let analytic = tape.grad(ev).map_or_else(|| vec![0.0; e.numel()], <[f64]>::to_vec);
        let maps = q.maps;
        let numeric = numeric_gradient(
            |x| {
                Ok((0..x.rows())
                    .map(|t| {
                        let y = maps[t].forward(x.row(t));
                        y.iter().zip(w.row(t)).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .sum())
            },
            &e,
            H,
        )?;
        s.record(name, max_relative_error(&analytic, &numeric));
    }

    // Codebook and commitment terms through a depth-2 residual stack.
    let mut store = ParamStore::<f64>::new();
    store.add("input", gaussian(&[5, 4], &mut s.rng))?;
    store.add("cb0", gaussian(&[6, 4], &mut s.rng))?;
    let mut cb1 = gaussian(&[6, 4], &mut s.rng);
    cb1.data_mut().iter_mut().for_each(|v| *v *= 0.3);
    store.add("cb1", cb1)?;
    let hook = s.hook("rvq_loss");
    let build = |tape: &mut Tape<f64>, frozen: Option<&RvqTrace>| -> Result<(Var, RvqTrace)> {
        let ids: Vec<_> = store.ids().collect();
        let (x, c0, c1) = (tape.param(ids[0]), tape.param(ids[1]), tape.param(ids[2]));
        let out = rvq_forward(tape, &[c0, c1], x, QuantMode::Rt, 0.25, frozen)?;
        let loss = rvq_loss(tape, &out)?;
        Ok((loss, out.trace))
    };
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let (_, trace) = build(&mut tape, None)?;
    let pinned = tape.detached_values().to_vec();
    let checks = grad_check_params(
        &store,
        |tape| {
            tape.pin_detached(pinned.clone());
            let (loss, _) = build(tape, Some(&trace))?;
            Ok(hook.finish(tape, loss))
        },
        PARAM_H,
        PROBES_PER_PARAM,
        PARAM_FLOOR,
    )?;
    s.record("rvq_loss", worst(&checks));
    Ok(())
}

fn worst(checks: &[crate::diffcore::ParamCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}

fn loss_checks(s: &mut Suite) -> Result<()> {
    let content = gaussian(&[5, 6], &mut s.rng);
    let style = gaussian(&[5, 6], &mut s.rng);
    let hook = s.hook("sd_loss");
    let c = content.clone();
    let report = grad_check_many(
        |tape, v| {
            let cv = tape.constant(c.clone());
            let loss = sd_loss(tape, cv, v[0])?;
            Ok(hook.finish(tape, loss))
        },
        std::slice::from_ref(&style),
        H,
    )?;
    s.record("sd_loss", report.max_rel_error);

    // The content side sits behind a stop-gradient: its gradient must be
    // exactly zero, reported here as the largest absolute entry.
    let mut tape = Tape::new();
    let cv = tape.leaf(content.with_grad());
    let sv = tape.leaf(style.with_grad());
    let loss = sd_loss(&mut tape, cv, sv)?;
    let loss = s.hook("sd_loss_content_zero").finish(&mut tape, loss);
    tape.backward(loss)?;
    let leak = tape
        .grad(cv)
        .map_or(0.0, |g| g.iter().map(|v| v.abs()).fold(0.0, f64::max));
    s.record("sd_loss_content_zero", leak);

    let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed());
    let mut heads = ParamStore::<f32>::new();
    let head_s = MlpHead::new(&mut heads, "head.style", 6, &mut rng)?;
    let head_p = MlpHead::new(&mut heads, "head.prosody", 5, &mut rng)?;
    let mut joined = heads.cast::<f64>();
    let style_id = joined.add("input.style", gaussian(&[4, 6], &mut s.rng))?;
    let low = gaussian(&[4, 5], &mut s.rng);
    let hook = s.hook("sp_loss");
    let checks = grad_check_params(
        &joined,
        |tape| {
            let sv = tape.param(style_id);
            let lv = tape.constant(low.clone());
            let loss = sp_loss(tape, sv, lv, &head_s, &head_p)?;
            Ok(hook.finish(tape, loss))
        },
        PARAM_H,
        PROBES_PER_PARAM,
        PARAM_FLOOR,
    )?;
    s.record("sp_loss", worst(&checks));
    Ok(())
}

impl Suite {
    fn rng_seed(&mut self) -> u64 {
        rand::Rng::gen(&mut self.rng)
    }
}

fn encode_check(s: &mut Suite) -> Result<()> {
    let config = StyleEncoderConfig {
        dim: 8,
        mel_bins: 6,
        codebook_size: 8,
        ..StyleEncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed());
    let mut f32_store = ParamStore::<f32>::new();
    let enc = StyleEncoder::new(config, &mut f32_store, "style", &mut rng)?;
    let store = f32_store.cast::<f64>();
    let mel = gaussian(&[6, 6], &mut s.rng);
    let content = gaussian(&[4, 8], &mut s.rng);
    let w = gaussian(&[4, 8], &mut s.rng);
    let vuv = VuvFlags::new(vec![true, true, false, true, false, true]);
    let mode = EncoderMode::default();
    let hook = s.hook("encode_style");
    let build = |tape: &mut Tape<f64>, frozen: Option<&RvqTrace>| -> Result<(Var, RvqTrace)> {
        let m = tape.constant(mel.clone());
        let c = tape.constant(content.clone());
        let out = enc.encode(tape, m, &vuv, c, &mode, frozen)?;
        let loss = weighted(tape, out.aligned, &w)?;
        let q = out
            .quant
            .ok_or_else(|| Error::invalid("encode_style", "no voiced frames reached the quantizer"))?;
        let l = rvq_loss(tape, &q)?;
        Ok((tape.add(loss, l)?, q.trace))
    };
    let mut tape = Tape::new();
    tape.bind_params(&store);
    let (_, trace) = build(&mut tape, None)?;
    let pinned = tape.detached_values().to_vec();
    let checks = grad_check_params(
        &store,
        |tape| {
            tape.pin_detached(pinned.clone());
            let (loss, _) = build(tape, Some(&trace))?;
            if tape.pin_mismatch() {
                return Err(Error::invalid("encode_style", "stop-gradient values changed shape"));
            }
            Ok(hook.finish(tape, loss))
        },
        PARAM_H,
        PROBES_PER_PARAM,
        PARAM_FLOOR,
    )?;
    s.record("encode_style", worst(&checks));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_with_one_line_per_check() {
        let results = gradient_suite(0, None).unwrap();
        assert_eq!(results.len(), CHECK_NAMES.len());
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
        assert_eq!(results.iter().find(|r| r.name == "sd_loss_content_zero").unwrap().max_rel_error, 0.0);
    }

    #[test]
    fn corrupted_backward_is_caught_by_name() {
        for name in ["matmul", "rt_backward", "sp_loss", "encode_style"] {
            let results = gradient_suite(1, Some(name)).unwrap();
            let failing: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            assert_eq!(failing, vec![name]);
        }
        assert!(gradient_suite(0, Some("nope")).is_err());
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(gradient_suite(5, None).unwrap(), gradient_suite(5, None).unwrap());
    }
}

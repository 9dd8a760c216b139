//! Central-difference gradient checking in `f64`.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Largest `|a - b| / max(|a|, |b|, 1e-8)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<G>(mut f: G, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    G: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Per-input outcome of [`grad_check_many`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares tape gradients of a scalar graph against central differences,
/// with respect to each tensor in `inputs`.
pub fn grad_check_many<G>(f: G, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = want_grad;
                tape.leaf(t)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.item(loss);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut numeric = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut xs = inputs.to_vec();
        let g = numeric_gradient(
            |probe| {
                xs[k] = probe.clone();
                Ok(eval(&xs, false)?.0)
            },
            &inputs[k],
            h,
        )?;
        numeric.push(g);
    }
    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .collect();
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        analytic,
        numeric,
    })
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}

/// `|a - b| / max(|a|, |b|, floor)` maximised over paired entries.
pub fn max_relative_error_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome for one named parameter of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Checks tape gradients of every parameter in `store` against central
/// differences. At most `max_per_param` evenly spaced entries of each
/// parameter are probed. `f` must rebuild the same graph from the bound
/// parameters each time it is called.
pub fn grad_check_params<G>(
    store: &ParamStore<f64>,
    f: G,
    h: f64,
    max_per_param: usize,
    floor: f64,
) -> Result<Vec<ParamCheck>>
where
    G: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        tape.bind_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.item(loss))
    };
    let mut tape = Tape::new();
    tape.bind_params(store);
    let loss = f(&mut tape)?;
    tape.backward(loss)?;

    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic_all = tape
            .grad(tape.param(id))
            .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            analytic.push(analytic_all[i]);
            numeric.push((up - down) / (2.0 * h));
        }
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: max_relative_error_floor(&analytic, &numeric, floor),
            checked: analytic.len(),
        });
    }
    Ok(out)
}

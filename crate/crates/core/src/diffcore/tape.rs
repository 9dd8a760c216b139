//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node holding its output value.
//! Inputs always precede their consumers, so a single reverse sweep over the
//! node list is a valid topological order. Reductions accumulate in `f64`
//! regardless of the storage type.

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supported 1-D convolutions over a `T×C` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Kernel `C_in×C_out`, a per-frame linear map.
    Pointwise,
    /// Kernel `7×C`, one filter per channel, zero "same" padding.
    Depthwise7,
}

pub const DEPTHWISE_KERNEL: usize = 7;

/// Elementwise ops exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    Neg,
    Square,
    Abs,
}

/// Backward rule for an op defined outside this module.
pub trait CustomOp<F: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (`None` for inputs it does not
    /// differentiate).
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>>;
}

const LN_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-8;
const GELU_COEF: f64 = 0.044715;

enum Op<F: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Neg(Var),
    Square(Var),
    Abs(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        mode: ConvMode,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        rows: Var,
        fill: Var,
        index: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RowCosine(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records one forward graph; rebuilt every training step.
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
    params: Vec<Var>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
    detached: Vec<Tensor<F>>,
    pinned: Option<Pinned<F>>,
}

/// Replacement values for `detach` calls, consumed in order.
struct Pinned<F: Element> {
    values: Vec<Tensor<F>>,
    next: usize,
    mismatch: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

#[inline]
fn at<F: Copy>(x: &[F], i: usize) -> F {
    if x.len() == 1 {
        x[0]
    } else {
        x[i]
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            detached: Vec::new(),
            pinned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Registers an input; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no path back to `v`.
    ///
    /// When values have been pinned with [`Tape::pin_detached`], the next
    /// pinned tensor is used instead of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let live = self.nodes[v.0].value.clone();
        let t = match &mut self.pinned {
            Some(p) => match p.values.get(p.next) {
                Some(pv) if pv.shape() == live.shape() => {
                    p.next += 1;
                    pv.clone()
                }
                _ => {
                    p.mismatch = true;
                    live
                }
            },
            None => live,
        };
        self.detached.push(t.clone());
        self.constant(t)
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> &[Tensor<F>] {
        &self.detached
    }

    /// Makes subsequent `detach` calls return `values` in order, so a
    /// rebuilt graph sees stop-gradient operands frozen at an earlier
    /// evaluation point. Finite differences of such a graph measure exactly
    /// what the analytic gradient describes.
    pub fn pin_detached(&mut self, values: Vec<Tensor<F>>) {
        self.pinned = Some(Pinned {
            values,
            next: 0,
            mismatch: false,
        });
    }

    /// True if pinned values ran out or did not match a detached shape.
    pub fn pin_mismatch(&self) -> bool {
        self.pinned
            .as_ref()
            .is_some_and(|p| p.mismatch || p.next != p.values.len())
    }

    /// Adds every parameter of `store` as a trainable leaf.
    pub fn bind_params(&mut self, store: &ParamStore<F>) {
        self.params = store
            .ids()
            .map(|id| {
                let t = store.get(id).clone();
                self.push(t, Op::Leaf, true)
            })
            .collect();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` may run again on the same graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Copies bound-parameter gradients into `store` (zeros where unused).
    pub fn write_param_grads(&self, store: &mut ParamStore<F>) {
        for (id, &var) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            let n = store.get(id).numel();
            let g = self
                .grad(var)
                .map(<[F]>::to_vec)
                .unwrap_or_else(|| vec![F::zero(); n]);
            store.get_mut(id).grad = Some(g);
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid("elementwise", "binary op needs two operands"));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Scale(s) => Ok(self.scale(a, s)),
            Elementwise::Gelu => Ok(self.gelu(a)),
            Elementwise::Neg => Ok(self.neg(a)),
            Elementwise::Square => Ok(self.square(a)),
            Elementwise::Abs => Ok(self.abs(a)),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, mk: fn(Var, Var) -> Op<F>) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast(op, ta.shape(), tb.shape())?;
        let n = numel(&shape);
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sf = F::of(s);
        self.unary(a, |x| x * sf, Op::Scale(a, sf))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    /// GELU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| F::of(gelu_fwd(x.as_f64())), Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = dims2("matmul", sa)?;
        let (k2, n) = dims2("matmul", sb)?;
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let d = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// `x[T×D] + b` with `b` of `D` elements added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, d) = dims2("add_row", self.shape(x))?;
        if self.value(b).numel() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..t {
            for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::new(vec![t, d], out)?, Op::AddRow(x, b), rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(Error::invalid("softmax", "last dimension is empty"));
        }
        let mut out = vec![F::zero(); t.numel()];
        for (row, orow) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (o, e) in orow.iter_mut().zip(exps) {
                *o = F::of(e / s);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Row-wise normalization, `(x - mean) / sqrt(var + 1e-5) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, d) = dims2("layer_norm", self.shape(x))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![F::zero(); t * d];
        let mut means = Vec::with_capacity(t);
        let mut rstds = Vec::with_capacity(t);
        for r in 0..t {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let xh = (row[j].as_f64() - mean) * rstd;
                out[r * d + j] = F::of(xh * g[j].as_f64() + b[j].as_f64());
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(Tensor::new(vec![t, d], out)?, op, rg))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, mode: ConvMode) -> Result<Var> {
        let (t, c) = dims2("conv1d", self.shape(x))?;
        let ks = self.shape(kernel).to_vec();
        let out = match mode {
            ConvMode::Pointwise => {
                let (cin, cout) = dims2("conv1d", &ks)?;
                if cin != c {
                    return Err(Error::shape("conv1d", self.shape(x), &ks));
                }
                let mut out = vec![F::zero(); t * cout];
                matmul_acc(self.value(x).data(), self.value(kernel).data(), &mut out, t, c, cout);
                Tensor::new(vec![t, cout], out)?
            }
            ConvMode::Depthwise7 => {
                if ks != [DEPTHWISE_KERNEL, c] {
                    return Err(Error::shape("conv1d", self.shape(x), &ks));
                }
                let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
                let half = DEPTHWISE_KERNEL / 2;
                let mut out = vec![F::zero(); t * c];
                for i in 0..t {
                    let orow = &mut out[i * c..(i + 1) * c];
                    for j in 0..DEPTHWISE_KERNEL {
                        let src = i as isize + j as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                        let krow = &kd[j * c..(j + 1) * c];
                        for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
                Tensor::new(vec![t, c], out)?
            }
        };
        let rg = self.needs(x) || self.needs(kernel);
        Ok(self.push(out, Op::Conv1d { x, kernel, mode }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(F::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.needs(x);
        self.push(Tensor::scalar(F::of(s)), Op::Mean(x), rg)
    }

    /// Mean over rows: `T×D -> 1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = dims2("mean_rows", self.shape(x))?;
        if t == 0 {
            return Err(Error::invalid("mean_rows", "no rows"));
        }
        let xd = self.value(x).data();
        let out = (0..d)
            .map(|j| F::of((0..t).map(|r| xd[r * d + j].as_f64()).sum::<f64>() / t as f64))
            .collect();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), rg))
    }

    /// Selects rows of `src` (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = dims2("gather_rows", self.shape(src))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&sd[i * d..(i + 1) * d]);
        }
        let rg = self.needs(src);
        let op = Op::GatherRows {
            src,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![index.len(), d], out)?, op, rg))
    }

    /// Places `rows[r]` at `index[r]` of a `len×D` output, `fill` elsewhere.
    pub fn scatter_rows(&mut self, rows: Var, fill: Var, index: &[usize], len: usize) -> Result<Var> {
        let (v, d) = dims2("scatter_rows", self.shape(rows))?;
        if self.value(fill).numel() != d {
            return Err(Error::shape("scatter_rows", self.shape(rows), self.shape(fill)));
        }
        if index.len() != v {
            return Err(Error::invalid("scatter_rows", format!("{} rows but {} positions", v, index.len())));
        }
        if index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("scatter_rows", "positions must be strictly increasing"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::invalid("scatter_rows", format!("position {bad} out of range for length {len}")));
        }
        let (rd, fd) = (self.value(rows).data(), self.value(fill).data());
        let mut out = Vec::with_capacity(len * d);
        for _ in 0..len {
            out.extend_from_slice(fd);
        }
        for (r, &pos) in index.iter().enumerate() {
            out[pos * d..(pos + 1) * d].copy_from_slice(&rd[r * d..(r + 1) * d]);
        }
        let rg = self.needs(rows) || self.needs(fill);
        let op = Op::ScatterRows {
            rows,
            fill,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![len, d], out)?, op, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = dims2("slice_cols", self.shape(x))?;
        if start + len > d {
            return Err(Error::invalid("slice_cols", format!("columns {start}..{} exceed {d}", start + len)));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![t, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "nothing to concatenate"))?;
        let (t, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (tp, dp) = dims2("concat_cols", self.shape(p))?;
            if tp != t {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![t, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Per-row cosine similarity `a_i·b_i / (|a_i||b_i| + 1e-8)`, shape `[T]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, d) = dims2("row_cosine", self.shape(a))?;
        if self.shape(b) != [t, d] {
            return Err(Error::shape("row_cosine", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..t)
            .map(|r| {
                let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                let (dot, na, nb) = cosine_terms(ra, rb);
                F::of(dot / (na * nb + COSINE_EPS))
            })
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![t], out)?, Op::RowCosine(a, b), rg))
    }

    /// Records an externally computed output whose gradient rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.needs(loss) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop(i, g, lo);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(lo[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    /// Accumulates `f(i)` for each output element `i` into `v`'s gradient,
    /// summing when `v` was broadcast from a single element.
    fn acc_elementwise(&self, lo: &mut [Option<Vec<F>>], v: Var, n: usize, f: impl Fn(usize) -> F) {
        if let Some(s) = self.slot(lo, v) {
            if s.len() == 1 && n > 1 {
                let total: f64 = (0..n).map(|i| f(i).as_f64()).sum();
                s[0] += F::of(total);
            } else {
                for (i, x) in s.iter_mut().enumerate() {
                    *x += f(i);
                }
            }
        }
    }

    fn backprop(&self, i: usize, g: &[F], lo: &mut [Option<Vec<F>>]) {
        let n = g.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_elementwise(lo, *a, n, |k| g[k]);
                self.acc_elementwise(lo, *b, n, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(lo, *a, n, |k| g[k]);
                self.acc_elementwise(lo, *b, n, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.acc_elementwise(lo, *a, n, |k| g[k] * at(db, k));
                self.acc_elementwise(lo, *b, n, |k| g[k] * at(da, k));
            }
            Op::Scale(a, s) => self.acc_elementwise(lo, *a, n, |k| g[k] * *s),
            Op::Neg(a) => self.acc_elementwise(lo, *a, n, |k| -g[k]),
            Op::Square(a) => {
                let da = val(*a);
                let two = F::of(2.0);
                self.acc_elementwise(lo, *a, n, |k| two * da[k] * g[k]);
            }
            Op::Abs(a) => {
                let da = val(*a);
                self.acc_elementwise(lo, *a, n, |k| {
                    if da[k] > F::zero() {
                        g[k]
                    } else if da[k] < F::zero() {
                        -g[k]
                    } else {
                        F::zero()
                    }
                });
            }
            Op::Gelu(a) => {
                let da = val(*a);
                self.acc_elementwise(lo, *a, n, |k| F::of(gelu_grad(da[k].as_f64())) * g[k]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let nn = sb[1];
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = self.slot(lo, *a) {
                    for r in 0..m {
                        let grow = &g[r * nn..(r + 1) * nn];
                        for p in 0..k {
                            let brow = &db[p * nn..(p + 1) * nn];
                            let mut s = F::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for r in 0..m {
                        let grow = &g[r * nn..(r + 1) * nn];
                        for p in 0..k {
                            let av = da[r * k + p];
                            if av == F::zero() {
                                continue;
                            }
                            for (o, &x) in gb[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = self.slot(lo, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                self.acc_elementwise(lo, *x, n, |k| g[k]);
                let d = self.value(*b).numel();
                if let Some(gb) = self.slot(lo, *b) {
                    for (j, o) in gb.iter_mut().enumerate() {
                        let s: f64 = g.iter().skip(j).step_by(d).map(|v| v.as_f64()).sum();
                        *o += F::of(s);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += F::of(yv.as_f64() * (gv.as_f64() - dot));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                let (xd, gd) = (val(*x), val(*gain));
                let xhat = |r: usize, j: usize| (xd[r * d + j].as_f64() - mean[r]) * rstd[r];
                if let Some(gx) = self.slot(lo, *x) {
                    for r in 0..t {
                        let gh: Vec<f64> = (0..d).map(|j| g[r * d + j].as_f64() * gd[j].as_f64()).collect();
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = (0..d).map(|j| gh[j] * xhat(r, j)).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += F::of(rstd[r] * (gh[j] - m1 - xhat(r, j) * m2));
                        }
                    }
                }
                if let Some(gg) = self.slot(lo, *gain) {
                    for (j, o) in gg.iter_mut().enumerate() {
                        let s: f64 = (0..t).map(|r| g[r * d + j].as_f64() * xhat(r, j)).sum();
                        *o += F::of(s);
                    }
                }
                if let Some(gb) = self.slot(lo, *bias) {
                    for (j, o) in gb.iter_mut().enumerate() {
                        let s: f64 = (0..t).map(|r| g[r * d + j].as_f64()).sum();
                        *o += F::of(s);
                    }
                }
            }
            Op::Conv1d { x, kernel, mode } => {
                let s = self.shape(*x);
                let (t, c) = (s[0], s[1]);
                let (xd, kd) = (val(*x), val(*kernel));
                match mode {
                    ConvMode::Pointwise => {
                        let cout = self.shape(*kernel)[1];
                        if let Some(gx) = self.slot(lo, *x) {
                            for r in 0..t {
                                let grow = &g[r * cout..(r + 1) * cout];
                                for p in 0..c {
                                    let krow = &kd[p * cout..(p + 1) * cout];
                                    let mut acc = F::zero();
                                    for (&a, &b) in grow.iter().zip(krow) {
                                        acc += a * b;
                                    }
                                    gx[r * c + p] += acc;
                                }
                            }
                        }
                        if let Some(gk) = self.slot(lo, *kernel) {
                            for r in 0..t {
                                let grow = &g[r * cout..(r + 1) * cout];
                                for p in 0..c {
                                    let xv = xd[r * c + p];
                                    for (o, &gv) in gk[p * cout..(p + 1) * cout].iter_mut().zip(grow) {
                                        *o += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                    ConvMode::Depthwise7 => {
                        let half = DEPTHWISE_KERNEL as isize / 2;
                        let taps = |mut f: Box<dyn FnMut(usize, usize, usize) + '_>| {
                            for r in 0..t {
                                for j in 0..DEPTHWISE_KERNEL {
                                    let src = r as isize + j as isize - half;
                                    if src >= 0 && src < t as isize {
                                        f(r, j, src as usize);
                                    }
                                }
                            }
                        };
                        if let Some(gx) = self.slot(lo, *x) {
                            taps(Box::new(|r, j, src| {
                                for ch in 0..c {
                                    gx[src * c + ch] += kd[j * c + ch] * g[r * c + ch];
                                }
                            }));
                        }
                        if let Some(gk) = self.slot(lo, *kernel) {
                            taps(Box::new(|r, j, src| {
                                for ch in 0..c {
                                    gk[j * c + ch] += xd[src * c + ch] * g[r * c + ch];
                                }
                            }));
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc_elementwise(lo, *x, n, |_| g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / F::of(n.max(1) as f64);
                self.acc_elementwise(lo, *x, n, |_| s);
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                let inv = F::of(1.0 / t as f64);
                self.acc_elementwise(lo, *x, t * d, |k| g[k % d] * inv);
            }
            Op::GatherRows { src, index } => {
                let d = self.value(*src).cols();
                if let Some(gs) = self.slot(lo, *src) {
                    for (r, &row) in index.iter().enumerate() {
                        for (o, &gv) in gs[row * d..(row + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ScatterRows { rows, fill, index } => {
                let d = self.value(*rows).cols();
                let len = n / d.max(1);
                if let Some(gr) = self.slot(lo, *rows) {
                    for (r, &pos) in index.iter().enumerate() {
                        for (o, &gv) in gr[r * d..(r + 1) * d].iter_mut().zip(&g[pos * d..(pos + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
                if let Some(gf) = self.slot(lo, *fill) {
                    let mut acc = vec![0f64; d];
                    let mut next = index.iter().peekable();
                    for pos in 0..len {
                        if next.peek() == Some(&&pos) {
                            next.next();
                            continue;
                        }
                        for (a, gv) in acc.iter_mut().zip(&g[pos * d..(pos + 1) * d]) {
                            *a += gv.as_f64();
                        }
                    }
                    for (o, a) in gf.iter_mut().zip(acc) {
                        *o += F::of(a);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let w = self.nodes[i].value.cols();
                if let Some(gx) = self.slot(lo, *x) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        for (o, &gv) in gx[r * d + start..r * d + start + w].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(lo, p) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            for (o, &gv) in gp[r * w..(r + 1) * w].iter_mut().zip(&grow[offset..offset + w]) {
                                *o += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::RowCosine(a, b) => {
                let d = self.value(*a).cols();
                let (ad, bd) = (val(*a), val(*b));
                let grads_for = |own: &[F], other: &[F], r: usize| -> Vec<F> {
                    let (ro, rt) = (&own[r * d..(r + 1) * d], &other[r * d..(r + 1) * d]);
                    let (dot, no, nt) = cosine_terms(ro, rt);
                    let den = no * nt + COSINE_EPS;
                    let gr = g[r].as_f64();
                    (0..d)
                        .map(|j| {
                            let radial = if no > 0.0 { dot * nt * ro[j].as_f64() / (no * den * den) } else { 0.0 };
                            F::of(gr * (rt[j].as_f64() / den - radial))
                        })
                        .collect()
                };
                let rows = g.len();
                if let Some(ga) = self.slot(lo, *a) {
                    for r in 0..rows {
                        for (o, v) in ga[r * d..(r + 1) * d].iter_mut().zip(grads_for(ad, bd, r)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for r in 0..rows {
                        for (o, v) in gb[r * d..(r + 1) * d].iter_mut().zip(grads_for(bd, ad, r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let out = op.backward(&ins, &self.nodes[i].value, g);
                for (&v, gv) in inputs.iter().zip(out) {
                    if let (Some(gv), Some(s)) = (gv, self.slot(lo, v)) {
                        for (o, x) in s.iter_mut().zip(gv) {
                            *o += x;
                        }
                    }
                }
            }
        }
    }
}

fn cosine_terms<F: Element>(a: &[F], b: &[F]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-8;

/// Below this `‖ê+q̂‖` the two directions are treated as antiparallel.
pub const ANTIPARALLEL_EPS: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: &[f64], n: f64) -> Vec<f64> {
    a.iter().map(|x| x / n).collect()
}

/// Orthogonal map taking `ê` onto `q̂`, applied without forming the matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Rotation {
    /// `R = I − 2rrᵀ + 2q̂êᵀ` with `r = (ê+q̂)/‖ê+q̂‖`.
    Rotate { e_hat: Vec<f64>, q_hat: Vec<f64>, r: Vec<f64> },
    /// `H = I − 2vvᵀ` with `v = (ê−q̂)/‖ê−q̂‖`, used when `ê ≈ −q̂`.
    Reflect { v: Vec<f64> },
}

impl Rotation {
    pub fn dim(&self) -> usize {
        match self {
            Rotation::Rotate { r, .. } => r.len(),
            Rotation::Reflect { v } => v.len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Rotation::Rotate { e_hat, q_hat, r } => {
                let (rx, ex) = (dot(r, x), dot(e_hat, x));
                x.iter()
                    .zip(r)
                    .zip(q_hat)
                    .map(|((xi, ri), qi)| xi - 2.0 * ri * rx + 2.0 * qi * ex)
                    .collect()
            }
            Rotation::Reflect { v } => reflect(v, x),
        }
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Rotation::Rotate { e_hat, q_hat, r } => {
                let (rx, qx) = (dot(r, x), dot(q_hat, x));
                x.iter()
                    .zip(r)
                    .zip(e_hat)
                    .map(|((xi, ri), ei)| xi - 2.0 * ri * rx + 2.0 * ei * qx)
                    .collect()
            }
            Rotation::Reflect { v } => reflect(v, x),
        }
    }
}

fn reflect(v: &[f64], x: &[f64]) -> Vec<f64> {
    let vx = dot(v, x);
    x.iter().zip(v).map(|(xi, vi)| xi - 2.0 * vi * vx).collect()
}

/// Builds the rotation aligning `e` with `q`. Fails with
/// [`Error::Degenerate`] when either vector is (near) zero.
pub fn rotation_align(e: &[f64], q: &[f64]) -> Result<Rotation> {
    if e.len() != q.len() {
        return Err(Error::shape("rotation_align", &[e.len()], &[q.len()]));
    }
    let (ne, nq) = (norm(e), norm(q));
    for n in [ne, nq] {
        if !(n > NORM_EPS) {
            return Err(Error::Degenerate { norm: n, eps: NORM_EPS });
        }
    }
    let (e_hat, q_hat) = (unit(e, ne), unit(q, nq));
    let sum: Vec<f64> = e_hat.iter().zip(&q_hat).map(|(a, b)| a + b).collect();
    let ns = norm(&sum);
    if ns < ANTIPARALLEL_EPS {
        let diff: Vec<f64> = e_hat.iter().zip(&q_hat).map(|(a, b)| a - b).collect();
        let nd = norm(&diff);
        return Ok(Rotation::Reflect { v: unit(&diff, nd) });
    }
    Ok(Rotation::Rotate {
        r: unit(&sum, ns),
        e_hat,
        q_hat,
    })
}

/// Frozen per-row linear map used in the backward pass (and in replay).
#[derive(Clone, Debug, PartialEq)]
pub enum RowMap {
    /// `x ↦ scale·R·x`, backward `g ↦ scale·Rᵀ·g`.
    Scaled { scale: f64, rotation: Rotation },
    /// `x ↦ x + offset`, backward is the identity (straight-through).
    Shift { offset: Vec<f64> },
}

impl RowMap {
    /// Rotation-trick map for `e → q`, falling back to straight-through
    /// when either vector is degenerate.
    pub fn rotation_trick(e: &[f64], q: &[f64]) -> Self {
        match rotation_align(e, q) {
            Ok(rotation) => RowMap::Scaled {
                scale: norm(q) / norm(e),
                rotation,
            },
            Err(_) => Self::straight_through(e, q),
        }
    }

    pub fn straight_through(e: &[f64], q: &[f64]) -> Self {
        RowMap::Shift {
            offset: q.iter().zip(e).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RowMap::Scaled { scale, rotation } => rotation.apply(x).into_iter().map(|v| v * scale).collect(),
            RowMap::Shift { offset } => x.iter().zip(offset).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        match self {
            RowMap::Scaled { scale, rotation } => rotation
                .apply_transpose(g)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
            RowMap::Shift { .. } => g.to_vec(),
        }
    }

    pub fn is_straight_through(&self) -> bool {
        matches!(self, RowMap::Shift { .. })
    }
}

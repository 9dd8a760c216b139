//! Style-direction losses and the weighted training objective.
//!
//! * `sd_loss` pushes style frames orthogonal to the (detached) content
//!   frames: `‖sg[E_c]·E_sᵀ‖²_F`, normalized by `T²` by default.
//! * `sp_loss` anchors style frames to prosody: `−Σ cos(head_p(low band),
//!   head_s(style))`.
//! * `total_loss` combines them with reconstruction and RVQ terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::styleenc::Linear;

/// Output width of both projection heads.
pub const HEAD_DIM: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdNormalization {
    /// Divide by `T_c·T_s`.
    #[default]
    PerFrame,
    /// Plain squared Frobenius norm.
    Raw,
}

/// Style-disentanglement loss. No gradient reaches `content`.
pub fn sd_loss<F: Element>(tape: &mut Tape<F>, content: Var, style: Var) -> Result<Var> {
    sd_loss_with(tape, content, style, SdNormalization::PerFrame)
}

pub fn sd_loss_with<F: Element>(tape: &mut Tape<F>, content: Var, style: Var, norm: SdNormalization) -> Result<Var> {
    let (cs, ss) = (tape.shape(content).to_vec(), tape.shape(style).to_vec());
    if cs.len() != 2 || cs != ss {
        return Err(Error::shape("sd_loss", &cs, &ss));
    }
    let c = tape.detach(content);
    let st = tape.transpose(style)?;
    let prod = tape.matmul(c, st)?;
    let sq = tape.square(prod);
    let total = tape.sum(sq);
    Ok(match norm {
        SdNormalization::PerFrame => {
            let t = cs[0].max(1) as f64;
            tape.scale(total, 1.0 / (t * t))
        }
        SdNormalization::Raw => total,
    })
}

/// Two-layer projection `in → 32 → GELU → 32`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    first: Linear,
    second: Linear,
    in_dim: usize,
}

impl MlpHead {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, in_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::invalid("mlp_head", "input dimension must be positive"));
        }
        Ok(Self {
            first: Linear::new(store, &format!("{name}.fc1"), in_dim, HEAD_DIM, true, rng)?,
            second: Linear::new(store, &format!("{name}.fc2"), HEAD_DIM, HEAD_DIM, true, rng)?,
            in_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("mlp_head", &shape, &[0, self.in_dim]));
        }
        let h = self.first.forward(tape, x)?;
        let h = tape.gelu(h);
        self.second.forward(tape, h)
    }
}

/// `−Σ_i cos(p_i, s̃_i)` on already projected frames.
pub fn sp_loss_projected<F: Element>(tape: &mut Tape<F>, style_proj: Var, prosody_proj: Var) -> Result<Var> {
    let (a, b) = (tape.shape(style_proj).to_vec(), tape.shape(prosody_proj).to_vec());
    if a != b {
        return Err(Error::shape("sp_loss", &a, &b));
    }
    let cos = tape.row_cosine(prosody_proj, style_proj)?;
    let s = tape.sum(cos);
    Ok(tape.neg(s))
}

/// Style-preserving loss between `style` (`T×D`) and `lowband` (`T×20`).
pub fn sp_loss<F: Element>(
    tape: &mut Tape<F>,
    style: Var,
    lowband: Var,
    head_s: &MlpHead,
    head_p: &MlpHead,
) -> Result<Var> {
    let (a, b) = (tape.shape(style).to_vec(), tape.shape(lowband).to_vec());
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::shape("sp_loss", &a, &b));
    }
    let s = head_s.forward(tape, style)?;
    let p = head_p.forward(tape, lowband)?;
    sp_loss_projected(tape, s, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rvq: f64,
    /// Kept for completeness; there is no adversarial term, so it multiplies 0.
    pub adv: f64,
    pub sd: f64,
    pub sp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rvq: 1.0,
            adv: 0.05,
            sd: 0.02,
            sp: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rvq", self.rvq), ("adv", self.adv), ("sd", self.sd), ("sp", self.sp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss_weights", format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub rvq: f64,
    pub sd: f64,
    pub sp: f64,
    pub total: f64,
}

/// Scalar loss nodes; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub rvq: Option<Var>,
    pub sd: Option<Var>,
    pub sp: Option<Var>,
}

fn finite_scalar<F: Element>(tape: &Tape<F>, v: Var, term: &str) -> Result<f64> {
    if tape.value(v).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(v).to_vec()));
    }
    let x = tape.item(v).as_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

/// `recon + λ_rvq·rvq + λ_sd·sd + λ_sp·sp`. Any non-finite term aborts with
/// [`Error::NonFinite`] naming it.
pub fn total_loss<F: Element>(tape: &mut Tape<F>, terms: LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        recon: finite_scalar(tape, terms.recon, "recon")?,
        ..LossReport::default()
    };
    let mut total = terms.recon;
    for (var, weight, slot, name) in [
        (terms.rvq, w.rvq, &mut report.rvq, "rvq"),
        (terms.sd, w.sd, &mut report.sd, "sd"),
        (terms.sp, w.sp, &mut report.sp, "sp"),
    ] {
        if let Some(v) = var {
            *slot = finite_scalar(tape, v, name)?;
            if weight != 0.0 {
                let scaled = tape.scale(v, weight);
                total = tape.add(total, scaled)?;
            }
        }
    }
    report.total = finite_scalar(tape, total, "total")?;
    Ok((total, report))
}

#[cfg(test)]
mod tests;

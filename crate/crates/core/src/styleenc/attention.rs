use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::Linear;
use crate::diffcore::{Element, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How mask (unvoiced) key positions are treated in the filler attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Logits multiplied by `β_j`: `β_mask` at mask keys, 1 elsewhere.
    #[default]
    Reweight,
    /// `β ∈ {1, 0}`: logits at mask keys are set to exactly 0.
    BinaryMask,
    /// Ordinary self-attention.
    Plain,
    /// Large negative bias (−1e4) added at mask keys. For study only.
    Additive,
}

const ADDITIVE_BLOCK: f64 = -1e4;

/// Query, key and value projections (no bias, no output projection).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionWeights {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?,
        })
    }
}

/// `T×T` matrix whose column `j` holds the per-key factor.
fn key_matrix<F: Element>(per_key: &[f64]) -> Tensor<F> {
    let t = per_key.len();
    let data = (0..t * t).map(|i| F::of(per_key[i % t])).collect();
    Tensor::new(vec![t, t], data).expect("square")
}

/// Self-attention with key-side reweighting. `mask_positions[j]` marks the
/// positions holding mask codes. Output is `softmax(L′)·v + x`.
pub fn biased_self_attention<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    weights: &AttentionWeights,
    mask_positions: &[bool],
    beta_mask: f64,
    heads: usize,
    mode: AttentionMode,
) -> Result<Var> {
    biased_self_attention_traced(tape, x, weights, mask_positions, beta_mask, heads, mode).map(|(y, _)| y)
}

/// Per-head nodes of one attention call: the adjusted logits `L′` and
/// their row-wise softmax.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

/// [`biased_self_attention`], also returning the intermediate nodes.
pub fn biased_self_attention_traced<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    weights: &AttentionWeights,
    mask_positions: &[bool],
    beta_mask: f64,
    heads: usize,
    mode: AttentionMode,
) -> Result<(Var, AttentionTrace)> {
    let shape = tape.shape(x).to_vec();
    let [t, d] = shape[..] else {
        return Err(Error::invalid("biased_self_attention", format!("expected T×D, got {shape:?}")));
    };
    if mask_positions.len() != t {
        return Err(Error::shape("biased_self_attention", &shape, &[mask_positions.len()]));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(
            "biased_self_attention",
            format!("dimension {d} not divisible by {heads} heads"),
        ));
    }
    let q = weights.query.forward(tape, x)?;
    let k = weights.key.forward(tape, x)?;
    let v = weights.value.forward(tape, x)?;

    let any_mask = mask_positions.iter().any(|&m| m);
    let adjust: Option<(bool, Var)> = match mode {
        AttentionMode::Plain => None,
        _ if !any_mask => None,
        AttentionMode::Reweight | AttentionMode::BinaryMask => {
            let b = if mode == AttentionMode::Reweight { beta_mask } else { 0.0 };
            let per_key: Vec<f64> = mask_positions.iter().map(|&m| if m { b } else { 1.0 }).collect();
            Some((true, tape.constant(key_matrix(&per_key))))
        }
        AttentionMode::Additive => {
            let per_key: Vec<f64> = mask_positions
                .iter()
                .map(|&m| if m { ADDITIVE_BLOCK } else { 0.0 })
                .collect();
            Some((false, tape.constant(key_matrix(&per_key))))
        }
    };

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut trace = AttentionTrace {
        logits: Vec::with_capacity(heads),
        probs: Vec::with_capacity(heads),
    };
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some((multiplicative, m)) = adjust {
            logits = if multiplicative {
                tape.mul(logits, m)?
            } else {
                tape.add(logits, m)?
            };
        }
        let attn = tape.softmax(logits)?;
        trace.logits.push(logits);
        trace.probs.push(attn);
        outs.push(tape.matmul(attn, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((tape.add(out, x)?, trace))
}

/// Cross-attention that resamples `style` (`T_s×D`) onto the content time
/// axis: `softmax(Q·Kᵀ/√D)·V` with `Q` from content and `K, V` from style.
pub fn align_to_content<F: Element>(
    tape: &mut Tape<F>,
    style: Var,
    content: Var,
    weights: &AttentionWeights,
) -> Result<Var> {
    let (ss, cs) = (tape.shape(style).to_vec(), tape.shape(content).to_vec());
    if ss.len() != 2 || cs.len() != 2 || ss[1] != cs[1] {
        return Err(Error::shape("align_to_content", &ss, &cs));
    }
    if ss[0] == 0 {
        return Err(Error::invalid("align_to_content", "empty style sequence"));
    }
    if cs[0] == 0 {
        return Err(Error::invalid("align_to_content", "empty content sequence"));
    }
    let q = weights.query.forward(tape, content)?;
    let k = weights.key.forward(tape, style)?;
    let v = weights.value.forward(tape, style)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (ss[1] as f64).sqrt());
    let attn = tape.softmax(logits)?;
    tape.matmul(attn, v)
}

use rand::Rng;

use crate::diffcore::{ConvMode, ParamId, ParamStore, Tape, Var, DEPTHWISE_KERNEL};
use crate::error::Result;

/// Pointwise projection `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<F: crate::diffcore::Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.conv1d(x, w, ConvMode::Pointwise)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Residual block: depthwise-7 conv → layer norm → pointwise → GELU →
/// pointwise, added back onto the input. Used both in the frontend and as
/// the ConvNeXt stage of each filler block.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    depthwise: ParamId,
    depthwise_bias: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    expand: Linear,
    project: Linear,
}

impl ConvBlock {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let depthwise = store.normal(
            format!("{name}.dw"),
            &[DEPTHWISE_KERNEL, dim],
            1.0 / (DEPTHWISE_KERNEL as f64).sqrt(),
            rng,
        )?;
        let depthwise_bias = store.zeros(format!("{name}.dw_b"), &[dim])?;
        let ln_gain = store.ones(format!("{name}.ln_g"), &[dim])?;
        let ln_bias = store.zeros(format!("{name}.ln_b"), &[dim])?;
        let expand = Linear::new(store, &format!("{name}.pw1"), dim, dim, true, rng)?;
        let project = Linear::new(store, &format!("{name}.pw2"), dim, dim, true, rng)?;
        Ok(Self {
            depthwise,
            depthwise_bias,
            ln_gain,
            ln_bias,
            expand,
            project,
        })
    }

    pub fn forward<F: crate::diffcore::Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let dw = tape.param(self.depthwise);
        let h = tape.conv1d(x, dw, ConvMode::Depthwise7)?;
        let dwb = tape.param(self.depthwise_bias);
        let h = tape.add_row(h, dwb)?;
        let (g, b) = (tape.param(self.ln_gain), tape.param(self.ln_bias));
        let h = tape.layer_norm(h, g, b)?;
        let h = self.expand.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.project.forward(tape, h)?;
        tape.add(x, h)
    }
}

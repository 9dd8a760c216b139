//! Vector quantization: codebooks, nearest-code search, rotation-trick and
//! straight-through gradient paths, and residual stacking.

mod codebook;
mod rotation;
mod rvq;

pub use codebook::{nearest_code, Codebook};
pub use rotation::{rotation_align, Rotation, RowMap, ANTIPARALLEL_EPS, NORM_EPS};
pub use rvq::{
    load_codebooks, quantize_frozen, quantize_rt, quantize_ste, rvq_forward, rvq_loss, save_codebooks, utilization,
    QuantMode, QuantizeOutput, Quantized, RvqConfig, RvqStack, RvqTrace,
};

//! Desk-scale laboratory: synthetic spectra with known content, style and
//! voicing, a toy model around the style encoder, training, metrics and the
//! ablation matrix.
//!
//! Samples are generated directly in the spectral domain. Voiced frames
//! are harmonic stacks at the style's (vibrato-modulated) F0, shaped by a
//! content-specific formant envelope. Unvoiced frames are high-band noise
//! whose cut-off depends on the content symbol. Content therefore lives in
//! the mid/high bins and style in the low band.

mod checkpoint;
mod data;
mod metrics;
mod model;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, save_identity_oracle, Checkpoint, CheckpointKind, Manifest, ParamEntry,
    MANIFEST_FILE, PARAMS_FILE,
};
pub use data::{
    band_energy_ratio, energy_ratio_vuv, generate_dataset, is_voiced_symbol, load_dataset, save_dataset, ContentSeq,
    StyleParams, SynthDataset, SynthSample, SynthSpec, N_SYMBOLS, STYLE_F0_BASES, SYNTH_SAMPLE_RATE,
};
pub use metrics::{
    eval_metrics, orthogonality, reconstruction_metrics, style_transfer, transfer_eval, vuv_f1, F0Decoder, Metrics,
    TransferPair, TransferReport,
};
pub use model::{to_features, ForwardOut, ModelConfig, SampleLosses, ToyModel};
pub use train::{
    ablation_row, render_ablation_table, run_ablation, run_ablation_with, train_loop, train_step, AblationReport, AblationRow,
    MetricRecord, Mode, TrainConfig, TrainOutcome, Trainer,
};

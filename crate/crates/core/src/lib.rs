//! Voiced-aware style encoding for expressive speech synthesis.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`] – a small reverse-mode tape over `f32`/`f64` arrays.
//! * [`audiofeat`] – WAV loading, STFT, log-mel, F0 and voicing flags.
//! * [`quantizer`] – codebooks, rotation-trick and straight-through
//!   quantization, residual stacking.
//! * [`styleenc`] – the style encoder: conv frontend, voiced extraction,
//!   mask-code filling with biased self-attention, alignment to content.
//! * [`objectives`] – disentanglement and prosody-preserving losses.
//! * [`synthlab`] – synthetic data, a toy model around the encoder,
//!   training, metrics and ablations.
//! * [`verify`] – the gradient verification suite.

pub mod audiofeat;
pub mod diffcore;
pub mod error;
pub mod objectives;
pub mod quantizer;
pub mod styleenc;
pub mod synthlab;
pub mod verify;

pub use error::{Error, Result};

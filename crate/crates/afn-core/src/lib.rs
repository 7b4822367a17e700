//! Attentive filtering network for audio replay-attack detection.
//!
//! The crate covers the full chain: log-power spectrogram features with
//! sliding-window mean normalization and length unification, an attentive
//! filter (u-net attention heatmap applied multiplicatively with a residual
//! copy) feeding a dilated residual network classifier, end-to-end training
//! with AMSGRAD and per-epoch dev-set EER model selection, and score-level
//! fusion of multiple systems via z-normalization and logistic regression.
//!
//! All numerics run on a small reverse-mode autodiff engine ([`tape`])
//! whose operators are verified against brute-force oracles and central
//! finite differences ([`gradcheck`], [`oracle`]).

pub mod error;
pub mod features;
pub mod gradcheck;
mod leio;
pub mod model;
pub mod oracle;
pub mod scoring;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{AfnError, Result};
pub use tensor::{Shape, Tensor};

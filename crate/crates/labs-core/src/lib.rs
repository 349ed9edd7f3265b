//! Multi-label classification of math problem text.
//!
//! The crate implements the LABS family of models: a BiLSTM text encoder
//! over mixed word/formula token sequences, optional label-semantic
//! attention, and optional multi-label smoothing through a trainable
//! label-confusion distribution, together with ranking metrics, an Adam
//! training loop with early stopping, and a four-variant ablation runner.
//!
//! Everything is built on a small f64 reverse-mode autodiff in [`tensor`];
//! no external ML framework is involved.

pub mod data;
pub mod mathtext;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

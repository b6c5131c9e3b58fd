//! Desk-scale staged transfer training for a bidirectional transformer
//! encoder.
//!
//! The crate covers the full loop: WordPiece vocabulary training and pair
//! encoding, a from-scratch encoder with hand-written backward rules, Adam
//! with warmup/decay, finite-difference gradient checking, masked-token plus
//! next-sentence pretraining, recasting of supervised transfer tasks,
//! a staged training pipeline with encoder-only checkpoints, and a
//! story-ending evaluation harness (context ablations, zero-shot probe).
//!
//! All numeric code is generic over the scalar type: training runs in `f32`,
//! gradient checking in `f64`. Concrete aliases live at the crate root.

pub mod adam;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision encoder parameters.
pub type Encoder32 = model::EncoderParams<f32>;
/// Gradient-check-precision encoder parameters.
pub type Encoder64 = model::EncoderParams<f64>;

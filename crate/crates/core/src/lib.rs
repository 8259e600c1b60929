//! Attention-based encoder-decoder grapheme-to-phoneme conversion.
//!
//! The numeric core is generic over [`Scalar`]; models train in `f32` and the
//! same code runs in `f64` for gradient checks. Aliases for both precisions
//! are exported at the crate root.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{G2pError, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use attention::AttentionKind;
pub use checkpoint::CheckpointMeta;
pub use data::{LexiconEntry, Vocabulary};
pub use decode::{ensemble_vote, greedy_decode, Prediction};
pub use eval::EvalReport;
pub use model::{EncoderMode, Model, ModelConfig};
pub use train::{TrainConfig, TrainState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

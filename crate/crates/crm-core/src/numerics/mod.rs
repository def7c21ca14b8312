//! Hand-written numerics: matrices, layers, losses, gradient checking, and
//! tensor checkpoints.
//!
//! Storage is `f32` by default; every reduction (dot products, softmax
//! denominators, loss sums, means) accumulates in `f64` before rounding back
//! to storage precision. The building blocks are generic over [`Scalar`] so
//! the same forward/backward code can be instantiated at `f64` end to end as
//! a high-precision reference.

pub mod attention;
pub mod checkpoint;
pub mod embedding;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod param;
pub mod scalar;

pub use attention::{CausalTransformer, TransformerConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use embedding::EmbeddingTable;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{l2_normalize_rows, L2NormCache, Activation, Linear, LinearCache, Mlp, MlpCache};
pub use loss::{in_batch_softmax_loss, InBatchLoss};
pub use matrix::Matrix;
pub use param::{sgd_step, HasParams, Param};
pub use scalar::Scalar;

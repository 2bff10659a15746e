//! Attention-map supervised training of a dense-block convolutional encoder.
//!
//! The crate covers the whole pipeline: tensors with reverse-mode autodiff,
//! attention-map generation from binary masks, the encoder and its two
//! posterior heads, losses and evaluation metrics, a deterministic synthetic
//! dataset, and the stage-wise / joint trainers that drive the ablation.

pub mod attention;
pub mod checkpoint;
pub mod distance;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mask;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tns;
pub mod trainer;

pub use attention::{AttentionKind, AttentionMap, MapStatus};
pub use distance::Metric;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId, OpInfo};
pub use mask::Mask;
pub use metrics::EvalReport;
pub use model::{count_parameters, Encoder, LocHead, ModelConfig, Posterior, SegDecoder};
pub use optim::{Adam, AdamConfig, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use synth::{Sample, ShapeFamily, SynthSpec};
pub use tensor::Tensor;
pub use trainer::{ExperimentSpec, Mode, Model, RunRecord, Supervision, Task};

/// Single-precision tensor, used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient verification.
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

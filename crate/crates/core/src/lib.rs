//! Chunked W8A8 prefill for heterogeneous NPU/CPU pipelines.
//!
//! * [`tensor`] / [`kernels`]: dense f32 and int8 kernels.
//! * [`quant`]: calibration, outlier detection, hot channels, layer pruning.
//! * [`shadow`]: the clamped-int8 plus float-residual linear.
//! * [`model`] / [`graph`]: a toy decoder, chunk planning, the chunk-sharing graph.
//! * [`scheduler`]: dependency graph, out-of-order greedy, in-order and exhaustive schedulers.
//! * [`experiment`]: config, reports and the end-to-end commands behind the CLI.

pub mod error;
pub mod kernels;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{QTensor, Tensor};
pub mod shadow;
pub mod store;
pub mod graph;
pub mod model;
pub mod prefill;
pub mod scheduler;
pub mod experiment;

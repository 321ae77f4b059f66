//! Quantized compact place-recognition networks: tensors, backbones, pooling
//! heads, post-training quantization, mixed-precision search, retrieval
//! evaluation and a latency/memory planner.

pub mod backbone;
pub mod error;
pub mod f16;
pub mod format;
pub mod fuse;
pub mod graph;
pub mod ops;
pub mod perf;
pub mod pooling;
pub mod precision;
pub mod qtns;
pub mod quant;
pub mod retrieval;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::ModelGraph;
pub use precision::{Precision, PrecisionConfig};
pub use tensor::{DType, Tensor};

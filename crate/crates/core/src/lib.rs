//! Layer-condensed KV cache decoder.
//!
//! A Llama-style decoder in which most layers attend only to keys and
//! values computed from the top layer, so inference caches `w + 1` layers
//! instead of `L`. Training runs the model as a fixed number of parallel
//! iterations over the whole sequence.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diag;
pub mod error;
pub mod infer;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, RunConfig};
pub use corpus::Corpus;
pub use diag::{BenchReport, CacheMode, InitKvMode, IterationTrace, SweepKind};
pub use infer::{KVCacheSet, SamplingConfig, SamplingMode, StreamingPolicy};
pub use autograd::{detach, finite_diff_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{
    layer_roles, BoundWeights, InitOptions, InitialKv, LayerRole, Model, ModelConfig, ModelGrads, ModelParams,
    ModelWeights, ParallelOptions, Placement,
};
pub use tensor::{DType, Scalar, SeededRng, Tensor};
pub use tokenizer::ByteTokenizer;
pub use train::{EvalIters, TrainConfig};

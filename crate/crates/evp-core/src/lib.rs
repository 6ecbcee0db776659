//! Text-conditioned depth estimation at desk scale: a dense-tensor
//! autodiff engine, attention-based feature refinement, embedding
//! aggregation, a metric-bins depth head, the evaluation metric suite,
//! and a deterministic synthetic-data training harness.

#![forbid(unsafe_code)]

pub mod backbone;
pub mod blocks;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod evpt;
pub mod gradcheck;
pub mod graph;
pub mod imafr;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ElemKind, Gradients, Graph, PoolAxis, PoolKind, PoolScope, Var};
pub use tensor::{broadcast_shape, stable_mean, stable_sum, Dtype, Element, MaskTensor, Tensor};

//! Speaker-embedding training with disentangled speaker/domain factors and
//! adversarial domain alignment, plus the feature front-end, a PLDA back-end,
//! and verification metrics needed to evaluate it end to end.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod mi;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

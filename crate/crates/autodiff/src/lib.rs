//! Dense tensors with reverse-mode differentiation, the handful of layers
//! needed by the siamese compressor models, and the Adadelta optimizer.

pub mod adadelta;
pub mod checkpoint;
mod conv;
mod error;
pub mod graph;
pub mod layers;
pub mod params;
mod tensor;

pub use adadelta::{adadelta_update, Adadelta, AdadeltaSlot};
pub use error::{AutodiffError, Result};
pub use graph::{BatchStats, Gradients, Graph, PoolMode, Var};
pub use params::{Mode, ParamEntry, ParamGrads, ParamId, ParamStore, Session};
pub use tensor::{Scalar, Tensor};

//! Minimal dense autograd used by the learned comparators.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{ConvGeom, Graph, Var};
pub use optim::Sgd;
pub use params::{
    Checkpoint, ParamGrads, ParamId, ParamStore, TensorRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use tensor::Tensor;

//! Dense tensor engine: layers, graph executor, loss and optimizer.

pub mod builder;
pub mod conv;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use builder::{GraphBuilder, NodeId};
pub use conv::ConvSpec;
pub use graph::{Grads, Graph, Node, Op, Param, Role, Tape};
pub use loss::{softmax, weighted_ce};
pub use ops::PoolSpec;
pub use optim::Sgd;
pub use scalar::Scalar;
pub use tensor::Tensor;

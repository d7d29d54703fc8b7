//! Minimal deterministic CPU neural-network toolkit: tensors, a reverse-mode
//! tape with the layers used by the classifiers and the autoencoder, and
//! optimisers.

pub mod graph;
pub mod params;
pub mod real;
pub mod tensor;

pub use graph::{Divergence, Grads, Graph, Var};
pub use params::{Adam, ParamCursor, ParamSet, Sgd};
pub use real::Real;
pub use tensor::Tensor;

//! Feed-forward neural networks with certified per-layer Lipschitz bounds.
//!
//! The crate provides:
//!
//! - dense tensor primitives (`tensor`): matrix multiply, 2-D convolution,
//!   transposed convolution, max pooling;
//! - layer and network definitions with forward evaluation and manual
//!   backpropagation (`layers`);
//! - operator-norm computation for every layer type under the l1, l2 and
//!   l-infinity norms, including power iteration for convolutional layers,
//!   and whole-network Lipschitz upper bounds (`norms`);
//! - the projection that rescales weights back into the feasible set and its
//!   application across a network (`constraint`);
//! - projected stochastic gradient training with SGD+Nesterov or AMSGrad
//!   (`optim`);
//! - model/dataset serialisation and synthetic data generation (`io`).
//!
//! All computation is in `f64` and is deterministic given a seeded RNG.

pub mod constraint;
pub mod error;
pub mod io;
pub mod layers;
pub mod norms;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Tensor};

//! Minimal neural-network substrate: dense matrices, layers with explicit
//! gradients, momentum SGD, gamma-family special functions, and seeded
//! randomness.

pub mod layer;
pub mod optim;
pub mod rng;
pub mod special;
pub mod tensor;

pub use layer::{sigmoid, softplus, Activation, DenseCache, DenseGrads, DenseLayer};
pub use optim::SgdState;
pub use rng::SeededRng;
pub use special::{digamma, lgamma, trigamma};
pub use tensor::Tensor2D;

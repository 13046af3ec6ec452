//! Differentiable 2D incompressible flow with a coupled rigid body, and the
//! controllers trained or tuned on it.

pub mod autodiff;
pub mod baselines;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod fluid;
pub mod grid;
pub mod losses;
pub mod policy;
pub mod rigid_body;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::Tensor;

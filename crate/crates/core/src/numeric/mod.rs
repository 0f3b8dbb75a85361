//! Dense numeric kernel: matrices, affine layers, analytic backprop, Adam
//! and a finite-difference gradient oracle.

mod adam;
pub mod gradcheck;
mod mlp;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{check_parameters, finite_difference_gradient, GradCheckReport};
pub use mlp::{mlp_apply, mlp_gradient, Activation, Dense, MlpCache, MlpParams};
pub use params::Parameters;
pub(crate) use params::prefixed;
pub use tensor::{axpy, dot, squared_distance, Tensor2};

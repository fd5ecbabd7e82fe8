//! Dense arrays, a recording tape for reverse-mode differentiation, and
//! supporting utilities (finite-difference checks, seeded randomness).

pub mod gradcheck;
pub mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use params::{ParamSet, Session};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

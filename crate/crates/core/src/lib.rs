pub mod attention;
pub mod complexity;
pub mod diagnostics;
pub mod em;
pub mod equivalence;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{MgkError, Result};
pub use tensor::{Mask, Tensor};

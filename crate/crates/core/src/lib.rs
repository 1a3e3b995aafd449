#![no_std]
extern crate alloc;

pub mod arch;
pub mod attacks;
pub mod complexity;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod losses;
pub mod scaling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

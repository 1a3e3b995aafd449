//! Error type shared by every module of the core crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Tensor or channel dimensions do not line up.
    Shape { op: &'static str, detail: String },
    /// One or more spec invariants failed; every failure is listed.
    InvalidSpec(Vec<String>),
    /// A width is not divisible by the grouping it is split into.
    Divisibility { dimension: &'static str, width: usize, divisor: usize },
    /// An argument outside the operation's domain.
    Domain(String),
    /// No integer configuration meets the budget and ratio constraints.
    Infeasible { target_flops: u64, minimal_flops: u64, detail: String },
    /// A gradient or loss became NaN or infinite.
    NonFinite { context: String, index: usize },
    /// Training diverged.
    Diverged { epoch: usize, step: usize, loss: f64 },
    /// Records that must agree on a key do not.
    Grouping(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidSpec(failures) => {
                write!(f, "invalid network spec ({} failures)", failures.len())?;
                for failure in failures {
                    write!(f, "; {failure}")?;
                }
                Ok(())
            }
            Error::Divisibility { dimension, width, divisor } => {
                write!(f, "{dimension} width {width} is not divisible by {divisor}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Infeasible { target_flops, minimal_flops, detail } => write!(
                f,
                "infeasible budget {target_flops} FLOPs (minimal achievable {minimal_flops}): {detail}"
            ),
            Error::NonFinite { context, index } => {
                write!(f, "non-finite value in {context} at batch index {index}")
            }
            Error::Diverged { epoch, step, loss } => {
                write!(f, "loss diverged to {loss} at epoch {epoch}, step {step}")
            }
            Error::Grouping(msg) => write!(f, "grouping error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

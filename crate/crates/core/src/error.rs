//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by construction, validation, and training paths.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes incompatible for an operation; the context names the op
    /// and, where available, the owning edge or parameter.
    ShapeMismatch(String),
    /// A configuration or genotype failed validation.
    Invalid(String),
    /// A non-finite value appeared where the math requires finite input.
    NonFinite(String),
    /// A memory budget cannot be satisfied; carries the minimum feasible
    /// budget in bytes.
    BudgetInfeasible { required: u64, budget: u64 },
    /// A sampling target ratio cannot be reached; carries the floor imposed by
    /// mandatory connections and the closest achievable ratio.
    UnattainableRatio { cell: usize, floor: f64, target: f64 },
    /// Genotype text failed to parse; the message carries position and token
    /// diagnostics.
    Parse(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(ctx) => write!(f, "shape mismatch: {ctx}"),
            CoreError::Invalid(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::BudgetInfeasible { required, budget } => write!(
                f,
                "memory budget {budget} B infeasible; minimum required {required} B"
            ),
            CoreError::UnattainableRatio { cell, floor, target } => write!(
                f,
                "cell {cell}: target ratio {target} unattainable (mandatory floor {floor})"
            ),
            CoreError::Parse(msg) => write!(f, "genotype parse error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

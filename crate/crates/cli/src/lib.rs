//! Configuration-driven experiment runner for additive-combination
//! compression.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod table;

use addlc_core::Error as CoreError;

pub use config::{ConfigError, ExperimentConfig};

/// Process exit code for a failed run: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                e if e.is_numerical() => 3,
                CoreError::InvalidConfig(_)
                | CoreError::BudgetExceedsDimension { .. }
                | CoreError::InvalidCodebookSize { .. }
                | CoreError::RankOutOfRange { .. }
                | CoreError::InvalidLayout(_)
                | CoreError::ShapeMismatch { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

//! Model compression as an additive combination of quantization, pruning and
//! low-rank parts, fitted with the learning-compression (LC) algorithm.
//!
//! The weights of a model live in a [`WeightStore`]. A [`ComboSpec`] assigns
//! groups of parameters to an ordered list of schemes, and an
//! [`AdditiveCombo`] holds the fitted parts. [`run_lc`] alternates training
//! steps and compression steps until the weights equal the decompressed sum.

pub mod combo;
pub mod container;
pub mod cstep;
pub mod error;
pub mod inference;
pub mod kmeans;
pub mod lc;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schemes;
pub mod weights;

pub use combo::{AdditiveCombo, BudgetScope, ComboSpec, Group, SchemeSpec};
pub use cstep::{cstep, cstep_backfit, cstep_exact_qfixed_prune, residual_norm, CStepConfig};
pub use error::{Error, Result};
pub use lc::{
    run_lc, GapTolerance, LStepConfig, LcConfig, LcOutcome, LcState, PenaltySchedule, Variant,
};
pub use metrics::{MetricsReport, StorageConfig};
pub use model::{Dataset, ModelSpec};
pub use schemes::CompressedPart;
pub use weights::WeightStore;

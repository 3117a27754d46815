//! Two-stage testing of biomarker-by-treatment interactions in randomized trials.
//!
//! * [`model`] fits the per-biomarker interaction and marginal models and their Wald tests.
//! * [`ridge`] fits the multivariate ridge screening model with cross-validated lambda.
//! * [`two_stage`] combines screening and stage-2 tests under FWER control.
//! * [`simulate`] generates clustered trial data and runs Monte Carlo power studies.
//! * [`diagnostics`] measures the empirical correlation between stage-1 and stage-2
//!   statistics.
//! * [`cli`] reads delimited trial data, runs configured analyses and writes tables.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ridge;
pub mod simulate;
pub mod two_stage;

pub use error::{Error, Result};
pub use model::{Family, TrialDataset, WaldResult};
pub use ridge::{RidgeConfig, RidgeFit, RidgeRanking, RidgeSolver};
pub use two_stage::{Procedure, ProcedureConfig, StageTwoReport, WeightScheme};

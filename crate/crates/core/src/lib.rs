//! Cox regression for left-, right- and doubly-truncated survival data.
//!
//! The main estimator is an EM algorithm for the conditional likelihood of
//! event times given truncation times and covariates ([`em`]). For
//! comparison the crate also provides the standard Cox fit, the
//! delayed-entry fit for left truncation ([`cox`]) and an inverse-probability
//! weighted fit that assumes truncation independent of everything
//! ([`selection`]), together with bootstrap inference, a conditional Kendall's
//! tau diagnostic ([`inference`]) and a Monte Carlo harness ([`simulation`]).

pub mod cox;
pub mod data;
pub mod em;
pub mod error;
pub mod exec;
pub mod inference;
pub mod rng;
pub mod report;
pub mod selection;
pub mod simulation;

pub use cox::{cox_left_adjusted, cox_standard, fit_weighted_cox, CoxFit, RiskRule, SolverSettings, Ties, WeightedObservation};
pub use data::{load_dataset, Bound, SubjectRecord, TruncatedDataset, TruncationMode};
pub use em::{fit_em, EMConfig, EMFit, ParameterState};
pub use error::{Error, Result};
pub use exec::ExecMode;
pub use inference::{bootstrap, conditional_kendall_tau, fit_estimator, BootstrapOptions, BootstrapResult, Estimator, EstimatorFit, KendallTauResult};
pub use report::{build_fit_report, FitReport};
pub use simulation::{run_grid, run_study, SimulationScenario, StudyOptions, StudyReport};

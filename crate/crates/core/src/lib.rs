//! Stochastic intervention effect estimation and optimization.
//!
//! * [`data`], [`synthetic`], [`folds`]: datasets, a ground-truth data generator, k-fold splits.
//! * [`nuisance`]: propensity and outcome models with cross-fitting.
//! * [`sie`]: the influence-function estimator of the counterfactual mean under an
//!   odds-shifting stochastic intervention.
//! * [`baselines`]: OLS plug-in, IPW, AIPW and uplift baseline policies.
//! * [`rs_sio`]: random-search optimization of per-unit interventions and policy values.
//!
//! The `sie` binary in this package drives all of the above from the command line.

pub mod baselines;
pub mod data;
pub mod error;
pub mod folds;
pub mod nuisance;
pub mod rs_sio;
pub mod sie;
pub mod stats;
pub mod synthetic;

pub use data::{load_csv, write_csv, CsvSchema, Dataset, GroundTruth};
pub use error::{Error, ErrorClass, Result};
pub use folds::{kfold_split, FoldAssignment};
pub use nuisance::{cross_fit, CrossFit, NuisanceConfig, NuisancePair, NuisanceValues};
pub use sie::{estimate_sie, SieConfig, SieReport, StochasticDegree};
pub use synthetic::{make_synthetic, DgpSpec};

//! Pull-based remote estimation of a finite Markov source under a
//! sampling budget, with the monitor tracking the joint law of source state
//! and age of incorrect information (AoII).
//!
//! - [`chain`]: the source.
//! - [`belief`]: the monitor's joint age–state belief and estimators.
//! - [`sim`]: ground truth and monitor in lockstep, with metrics.
//! - [`policy`]: pull policies, steering and budget calibration.
//! - [`dqn`]: value-network policy trained on exact belief expectations.
//! - [`oracle`]: brute-force enumeration used to certify the recursion.
//! - [`experiment`]: config-driven sweeps and traces behind the CLI.

pub mod belief;
pub mod chain;
pub mod dqn;
pub mod experiment;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rng;
pub mod sim;

pub use belief::{Belief, Estimator, EstimatorKind, Observation};
pub use chain::{StateIndex, TransitionMatrix};
pub use policy::PolicyKind;
pub use sim::{Action, RunConfig, RunMetrics};

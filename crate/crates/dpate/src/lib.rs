//! Differentially private average treatment effect estimation for
//! observational tabular data.
//!
//! The estimator runs propensity score matching in three phases (model
//! training, similar-sample matching, causal effect estimation) and makes
//! each phase private: Laplace noise on regression weights and propensity
//! scores, randomized response on treatment bits, and Laplace noise on the
//! aggregated potential-outcome sums, whose sensitivity is bounded by an
//! adaptive per-sample matching limit. Two protection levels are supported:
//! label-level (only outcomes are private) and sample-level (whole records
//! are private).
//!
//! ```
//! use dpate::{io, pipeline, PrivacyLevel, RunConfig};
//!
//! # fn main() -> dpate::Result<()> {
//! let (dataset, true_tau) = io::generate_synth(&io::SynthParams::default())?;
//! let config = RunConfig::new(PrivacyLevel::SampleLevel, 2.0, 42);
//! let result = pipeline::run(&dataset, &config)?;
//! assert!((result.tau_hat - true_tau).abs() < 1.0);
//! # Ok(())
//! # }
//! ```

// `!(x > 0.0)` is used on purpose for parameter guards: it rejects NaN
// along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dp;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod propensity;

pub use dataset::{Dataset, GroupCounts, PrivacyLevel};
pub use dp::{BudgetLedger, BudgetSplit, Composition, NoiseSource};
pub use error::{Error, Result};
pub use estimation::{AteResult, LimitMode, MatchConfig, MatchPlan};
pub use pipeline::{run, run_oracle_psm, RunConfig};

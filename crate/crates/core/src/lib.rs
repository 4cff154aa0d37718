//! Sequential Monte Carlo p-values whose resampling risk is uniformly
//! bounded.
//!
//! A [`BoundaryTable`] holds the stopping boundaries for a threshold
//! `alpha` and spending sequence; [`runner::run`] consumes exceedance
//! indicators until a boundary is crossed; [`inference`] evaluates the
//! procedure exactly under any true `p`; [`applications`] builds the
//! contingency-table bootstrap studies on top.

pub mod applications;
pub mod boundary;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod persist;
pub mod runner;
pub mod source;
pub mod spending;

pub use boundary::{BoundaryRow, BoundaryTable, TableHandle};
pub use error::{Error, Result};
pub use estimate::Estimate;
pub use runner::{
    h_alpha, interim_interval, run, InterimInterval, Progress, ReportEvery, RunOptions, RunResult, RunStatus, Side,
    TableCache,
};
pub use source::{sim_rng, BernoulliSource, BitSource, SimRng, SourceError};
pub use spending::{SpendingKind, SpendingSequence};

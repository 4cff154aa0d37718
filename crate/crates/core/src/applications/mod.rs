//! The contingency-table case study: likelihood-ratio test of
//! independence, parametric bootstrap through the sequential procedure,
//! nested level checks and the double bootstrap, and sample-size search.

pub mod bootstrap;
pub mod contingency;
pub mod sample_size;

pub use bootstrap::{DoubleBootstrap, SampleCounter, SampleCounts, Study};
pub use contingency::{chisq_critical, chisq_pvalue, lrt_statistic, ContingencyTable, NullModel};
pub use sample_size::{find_sample_size, SampleSize};

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A non-negative rational `num / den`, used for estimates `S_tau / tau`
/// and for thresholds compared against them. Ordering is exact
/// (cross-multiplication), so ties between different `(tau, S_tau)` pairs
/// are resolved correctly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    num: u64,
    den: u64,
}

/// Denominator used when a real-valued bound has to be represented as an
/// [`Estimate`].
const DYADIC_DEN: u64 = 1 << 40;

impl Estimate {
    /// # Panics
    /// If `den == 0`.
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "estimate with zero denominator");
        Estimate { num, den }
    }

    pub const ZERO: Estimate = Estimate { num: 0, den: 1 };
    pub const ONE: Estimate = Estimate { num: 1, den: 1 };

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Largest dyadic rational `<= x`, clamped to `[0, 1]`.
    pub fn floor_of(x: f64) -> Self {
        let x = x.clamp(0.0, 1.0);
        Estimate::new((x * DYADIC_DEN as f64).floor() as u64, DYADIC_DEN)
    }

    /// Smallest dyadic rational `>= x`, clamped to `[0, 1]`.
    pub fn ceil_of(x: f64) -> Self {
        let x = x.clamp(0.0, 1.0);
        Estimate::new((x * DYADIC_DEN as f64).ceil() as u64, DYADIC_DEN)
    }

    /// Compares `s / n` with `self` without forming the quotient.
    pub fn cmp_fraction(&self, s: u64, n: u64) -> Ordering {
        (s as u128 * self.den as u128).cmp(&(self.num as u128 * n as u128))
    }
}

impl PartialEq for Estimate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Estimate {}

impl PartialOrd for Estimate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Estimate {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

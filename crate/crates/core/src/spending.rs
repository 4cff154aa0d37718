//! Spending sequences: the schedule `eps_n` by which the total risk budget
//! `eps` is released over the steps of the sequential procedure.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// Largest total budget accepted. The uniform risk guarantee needs
/// `eps <= 1/4`.
pub const MAX_EPSILON: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpendingKind {
    /// `eps_n = eps * n / (k + n)`.
    Default { k: u64 },
    /// Explicit values `eps_1, eps_2, ...`; the sequence is undefined past
    /// the end of the table.
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendingSequence {
    epsilon: f64,
    #[serde(flatten)]
    kind: SpendingKind,
}

impl SpendingSequence {
    pub fn new_default(epsilon: f64, k: u64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if k == 0 {
            return Err(invalid("spending parameter k must be a positive integer"));
        }
        Ok(SpendingSequence { epsilon, kind: SpendingKind::Default { k } })
    }

    /// A tabulated sequence. Values must be non-decreasing and lie in
    /// `[0, epsilon)`.
    pub fn new_custom(epsilon: f64, values: Vec<f64>) -> Result<Self> {
        check_epsilon(epsilon)?;
        if values.is_empty() {
            return Err(invalid("custom spending table is empty"));
        }
        let mut prev = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !(v >= 0.0 && v < epsilon) {
                return Err(invalid(format!("custom spending value eps_{} = {v} is outside [0, {epsilon})", i + 1)));
            }
            if v < prev {
                return Err(invalid(format!("custom spending table decreases at n = {} ({v} < {prev})", i + 1)));
            }
            prev = v;
        }
        Ok(SpendingSequence { epsilon, kind: SpendingKind::Custom { values } })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kind(&self) -> &SpendingKind {
        &self.kind
    }

    /// Last step for which the sequence is defined; `None` when unbounded.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<u64> {
        match &self.kind {
            SpendingKind::Default { .. } => None,
            SpendingKind::Custom { values } => Some(values.len() as u64),
        }
    }

    /// `eps_n`, with `eps_0 = 0`.
    pub fn value(&self, n: u64) -> Result<f64> {
        match &self.kind {
            SpendingKind::Default { k } => {
                let n = n as f64;
                Ok(self.epsilon * n / (*k as f64 + n))
            }
            SpendingKind::Custom { values } => {
                if n == 0 {
                    Ok(0.0)
                } else {
                    values.get(n as usize - 1).copied().ok_or(Error::SpendingOutOfRange { n, len: values.len() as u64 })
                }
            }
        }
    }

    /// `eps_n - eps_{n-1}` for `n >= 1`. The default kind uses the closed
    /// form `eps k / ((k+n)(k+n-1))`, which keeps full relative precision
    /// long after the plain difference has cancelled away.
    pub fn increment(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(invalid("spending increments start at n = 1"));
        }
        match &self.kind {
            SpendingKind::Default { k } => {
                let a = (*k + n) as f64;
                Ok(self.epsilon * *k as f64 / (a * (a - 1.0)))
            }
            SpendingKind::Custom { .. } => Ok(self.value(n)? - self.value(n - 1)?),
        }
    }

    /// `Delta_n = sqrt(-n log(eps_n - eps_{n-1}) / 2)`, or `+inf` when the
    /// increment is zero.
    pub fn delta(&self, n: u64) -> Result<f64> {
        let inc = self.increment(n)?;
        if inc <= 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok((-(n as f64) * inc.ln() / 2.0).max(0.0).sqrt())
    }

    /// A short identifier for the sequence, used in boundary file headers.
    pub fn descriptor(&self) -> String {
        match &self.kind {
            SpendingKind::Default { k } => format!("default;k={k}"),
            SpendingKind::Custom { values } => {
                let mut hasher = Sha256::new();
                for v in values {
                    hasher.update(v.to_le_bytes());
                }
                let digest = hasher.finalize();
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                format!("custom;sha256={hex}")
            }
        }
    }

    /// Checks the sub-exponential decay condition on the increments up to
    /// `horizon`; see [`SpendingReport`].
    pub fn validate(&self, horizon: u64, decay_threshold: f64) -> SpendingReport {
        validate_spending(self, horizon, decay_threshold)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= MAX_EPSILON {
        Ok(())
    } else {
        Err(invalid(format!("epsilon must lie in (0, 1/4], got {epsilon}")))
    }
}

pub const DEFAULT_DECAY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum SpendingFlag {
    /// `eps_n <= eps_{n-1}`: `Delta_n` is infinite at this step.
    NonPositive { n: u64 },
    /// The increment has decayed, relative to the first positive increment,
    /// at an average rate above the threshold.
    FastDecay { n: u64, rate: f64 },
    /// The sequence is not defined this far.
    Undefined { n: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct SpendingReport {
    pub horizon: u64,
    pub threshold: f64,
    /// `increments[i]` is `eps_{i+1} - eps_i`.
    pub increments: Vec<f64>,
    pub flags: Vec<SpendingFlag>,
}

impl SpendingReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Evaluates the increments `eps_n - eps_{n-1}` for `n <= horizon` and flags
/// the ones that threaten the `log(eps_n - eps_{n-1}) = o(n)` condition.
///
/// The decay rate at step `n` is `log(inc_ref / inc_n) / (n - n_ref)`, where
/// `inc_ref` is the first positive increment. Measuring from the first
/// increment rather than from 1 removes the constant `log(1/inc_ref)` that
/// would otherwise flag every small-budget sequence at small `n`.
pub fn validate_spending(seq: &SpendingSequence, horizon: u64, decay_threshold: f64) -> SpendingReport {
    let mut increments = Vec::with_capacity(horizon as usize);
    let mut flags = Vec::new();
    let mut reference: Option<(u64, f64)> = None;
    for n in 1..=horizon {
        let inc = match seq.increment(n) {
            Ok(v) => v,
            Err(_) => {
                flags.push(SpendingFlag::Undefined { n });
                break;
            }
        };
        increments.push(inc);
        if inc <= 0.0 {
            flags.push(SpendingFlag::NonPositive { n });
            continue;
        }
        match reference {
            None => reference = Some((n, inc)),
            Some((n0, inc0)) => {
                let rate = (inc0 / inc).ln() / (n - n0) as f64;
                if rate > decay_threshold {
                    flags.push(SpendingFlag::FastDecay { n, rate });
                }
            }
        }
    }
    SpendingReport { horizon, threshold: decay_threshold, increments, flags }
}

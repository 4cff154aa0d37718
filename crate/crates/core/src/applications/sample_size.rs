//! Smallest sample size reaching a target power, by bisection with each
//! power comparison decided by the sequential procedure.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::runner::{run, RunOptions, RunStatus, Side, TableCache};
use crate::source::BitSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSize {
    /// Power at `n` was decided above the target and at `n - 1` (or the
    /// lower end of the range) below it.
    Exact(u64),
    /// A truncated power check left the answer somewhere in `(lo, hi]`.
    Unresolved { lo: u64, hi: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Above,
    Below,
    Undecided,
}

/// `evaluator(n)` must yield the rejection indicators of independent
/// replications of the test at sample size `n`; power is assumed
/// non-decreasing in `n`. Each comparison runs the procedure with threshold
/// `target_power`, truncated at `max_steps` (untruncated checks can take
/// arbitrarily long when the power is close to the target).
pub fn find_sample_size<F, S>(
    mut evaluator: F,
    target_power: f64,
    cache: &TableCache,
    max_steps: u64,
    lo: u64,
    hi: u64,
) -> Result<SampleSize>
where
    F: FnMut(u64) -> S,
    S: BitSource,
{
    if lo > hi {
        return Err(invalid(format!("empty search range [{lo}, {hi}]")));
    }
    if target_power <= 0.0 {
        return Ok(SampleSize::Exact(lo));
    }
    if target_power >= 1.0 {
        return Err(invalid("target power must be below 1"));
    }
    let table = cache.get(target_power)?;
    let opts = RunOptions { max_steps: Some(max_steps), ..Default::default() };
    let mut check = |n: u64| -> Result<Verdict> {
        let res = run(&table, evaluator(n), &opts, &mut |_| {})?;
        Ok(match res.status {
            RunStatus::Stopped { side: Side::Upper, .. } => Verdict::Above,
            RunStatus::Stopped { side: Side::Lower, .. } => Verdict::Below,
            RunStatus::Truncated { .. } => Verdict::Undecided,
        })
    };

    match check(hi)? {
        Verdict::Above => {}
        Verdict::Below => {
            return Err(Error::NonBracketing(format!("power at n = {hi} was decided below {target_power}")))
        }
        Verdict::Undecided => return Ok(SampleSize::Unresolved { lo, hi }),
    }
    let lo_known = match check(lo)? {
        Verdict::Above => return Ok(SampleSize::Exact(lo)),
        Verdict::Below => true,
        Verdict::Undecided => false,
    };
    if !lo_known {
        return Ok(SampleSize::Unresolved { lo, hi });
    }
    // Invariant: power at `lo` below the target, at `hi` above.
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match check(mid)? {
            Verdict::Above => hi = mid,
            Verdict::Below => lo = mid,
            Verdict::Undecided => return Ok(SampleSize::Unresolved { lo, hi }),
        }
    }
    Ok(SampleSize::Exact(hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::BernoulliSource;
    use crate::spending::SpendingSequence;

    fn cache() -> TableCache {
        TableCache::new(SpendingSequence::new_default(1e-3, 1000).unwrap())
    }

    #[test]
    fn zero_target_is_lower_end() {
        let r = find_sample_size(|_| BernoulliSource::new(0.0, 0), 0.0, &cache(), 100, 3, 9).unwrap();
        assert_eq!(r, SampleSize::Exact(3));
    }

    #[test]
    fn step_power() {
        let r = find_sample_size(
            |n| BernoulliSource::new(if n >= 37 { 0.95 } else { 0.2 }, n),
            0.8,
            &cache(),
            100_000,
            1,
            100,
        )
        .unwrap();
        assert_eq!(r, SampleSize::Exact(37));
    }

    #[test]
    fn non_bracketing_range() {
        let r = find_sample_size(|n| BernoulliSource::new(0.2, n), 0.8, &cache(), 100_000, 1, 100);
        assert!(matches!(r, Err(Error::NonBracketing(_))));
    }

    #[test]
    fn flat_power_at_target_is_unresolved() {
        let r = find_sample_size(|n| BernoulliSource::new(0.8, n), 0.8, &cache(), 2_000, 1, 100).unwrap();
        assert_eq!(r, SampleSize::Unresolved { lo: 1, hi: 100 });
    }
}

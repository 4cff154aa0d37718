//! Driving the sequential procedure over a bit stream.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::boundary::{BoundaryTable, TableHandle};
use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::source::BitSource;
use crate::spending::{SpendingKind, SpendingSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunState {
    /// Steps consumed.
    pub n: u64,
    /// Partial sum `S_n`.
    pub s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Stopped {
        tau: u64,
        s_tau: u64,
        side: Side,
    },
    /// No decision within the step budget or before the stream ended.
    Truncated {
        n: u64,
        s: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunResult {
    #[serde(flatten)]
    pub status: RunStatus,
    /// `S_tau / tau` when stopped, `S_n / n` when truncated.
    pub p_hat: f64,
}

impl RunResult {
    fn stopped(tau: u64, s_tau: u64, side: Side) -> Self {
        RunResult { status: RunStatus::Stopped { tau, s_tau, side }, p_hat: s_tau as f64 / tau as f64 }
    }

    fn truncated(n: u64, s: u64) -> Self {
        RunResult { status: RunStatus::Truncated { n, s }, p_hat: s as f64 / n as f64 }
    }

    pub fn side(&self) -> Option<Side> {
        match self.status {
            RunStatus::Stopped { side, .. } => Some(side),
            RunStatus::Truncated { .. } => None,
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.side().is_some()
    }

    /// Steps consumed.
    pub fn steps(&self) -> u64 {
        match self.status {
            RunStatus::Stopped { tau, .. } => tau,
            RunStatus::Truncated { n, .. } => n,
        }
    }

    /// The estimate as an exact fraction.
    pub fn estimate(&self) -> Estimate {
        match self.status {
            RunStatus::Stopped { tau, s_tau, .. } => Estimate::new(s_tau, tau),
            RunStatus::Truncated { n, s } => Estimate::new(s, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Continue(RunState),
    Stopped(RunResult),
}

const MIN_BLOCK: u64 = 256;
const MAX_BLOCK: u64 = 8192;

/// Incremental form of the procedure: feed bits one at a time.
#[derive(Debug, Clone)]
pub struct Runner {
    table: TableHandle,
    state: RunState,
    block: Vec<(i64, i64)>,
    block_start: u64,
    stopped: Option<RunResult>,
}

impl Runner {
    pub fn new(table: TableHandle) -> Self {
        Runner { table, state: RunState { n: 0, s: 0 }, block: Vec::new(), block_start: 1, stopped: None }
    }

    pub fn state(&self) -> RunState {
        self.state
    }

    pub fn table(&self) -> &TableHandle {
        &self.table
    }

    fn bounds(&mut self, n: u64) -> Result<(i64, i64)> {
        let end = self.block_start + self.block.len() as u64;
        if n < self.block_start || n >= end {
            let len = (self.block.len() as u64 * 2).clamp(MIN_BLOCK, MAX_BLOCK);
            self.block = self.table.bounds_block(n, len)?;
            self.block_start = n;
        }
        Ok(self.block[(n - self.block_start) as usize])
    }

    /// Consumes one bit. After a stop, further calls return the same result.
    pub fn step(&mut self, bit: bool) -> Result<Step> {
        if let Some(done) = self.stopped {
            return Ok(Step::Stopped(done));
        }
        let n = self.state.n + 1;
        let s = self.state.s + bit as u64;
        let (lower, upper) = self.bounds(n)?;
        self.state = RunState { n, s };
        let side = if s as i64 >= upper {
            Side::Upper
        } else if s as i64 <= lower {
            Side::Lower
        } else {
            return Ok(Step::Continue(self.state));
        };
        let result = RunResult::stopped(n, s, side);
        self.stopped = Some(result);
        Ok(Step::Stopped(result))
    }
}

/// When to emit progress records. Unset fields never trigger.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReportEvery {
    pub steps: Option<u64>,
    pub wall: Option<Duration>,
}

impl ReportEvery {
    pub fn is_active(&self) -> bool {
        self.steps.is_some() || self.wall.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub max_steps: Option<u64>,
    pub report: ReportEvery,
    /// Initial look-ahead window for the interim interval in progress
    /// records; `ceil(2 / alpha)` when unset.
    pub interim_window: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Progress {
    pub n: u64,
    pub s: u64,
    pub p_min: f64,
    pub p_max: f64,
    pub elapsed_ms: u64,
}

/// Runs until a boundary is hit, `max_steps` bits were consumed, or the
/// stream ends. Progress records go to `sink`; they do not influence the
/// result.
pub fn run<S: BitSource>(
    table: &TableHandle,
    mut source: S,
    opts: &RunOptions,
    sink: &mut dyn FnMut(&Progress),
) -> Result<RunResult> {
    let mut runner = Runner::new(table.clone());
    let clock = opts.report.is_active().then(Instant::now);
    let mut last_report = Duration::ZERO;
    loop {
        let state = runner.state();
        if opts.max_steps.is_some_and(|m| state.n >= m) {
            return truncate(state);
        }
        let bit = match source.next_bit() {
            Ok(Some(bit)) => bit,
            Ok(None) => return truncate(state),
            Err(e) => return Err(Error::Source { n: state.n, s: state.s, message: e.0 }),
        };
        let state = match runner.step(bit)? {
            Step::Stopped(result) => return Ok(result),
            Step::Continue(state) => state,
        };
        if let Some(clock) = clock {
            let by_steps = opts.report.steps.is_some_and(|k| k > 0 && state.n % k == 0);
            let elapsed = clock.elapsed();
            let by_wall = opts.report.wall.is_some_and(|d| elapsed - last_report >= d);
            if by_steps || by_wall {
                last_report = elapsed;
                let interim = {
                    let mut t = table.write();
                    interim_interval(&mut t, state.n, opts.interim_window)?
                };
                sink(&Progress {
                    n: state.n,
                    s: state.s,
                    p_min: interim.lower_value(),
                    p_max: interim.upper_value(),
                    elapsed_ms: elapsed.as_millis() as u64,
                });
            }
        }
    }
}

fn truncate(state: RunState) -> Result<RunResult> {
    if state.n == 0 {
        Err(Error::EmptyStream)
    } else {
        Ok(RunResult::truncated(state.n, state.s))
    }
}

/// Interval that contains the eventual estimate of a run that has not
/// stopped by step `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterimInterval {
    pub n: u64,
    pub lower: Estimate,
    pub upper: Estimate,
    /// Last step whose boundaries were inspected directly.
    pub lookahead: u64,
}

impl InterimInterval {
    pub fn lower_value(&self) -> f64 {
        self.lower.value()
    }

    pub fn upper_value(&self) -> f64 {
        self.upper.value()
    }

    pub fn contains(&self, e: Estimate) -> bool {
        self.lower <= e && e <= self.upper
    }
}

/// Beyond this many steps the look-ahead gives up and returns the
/// envelope-widened interval.
const LOOKAHEAD_CAP: u64 = 1 << 24;

/// Upper end of the estimates at step `nu`: `U_nu / nu` itself, widened to
/// `U_{nu-1} / nu` where the boundary drops, since the walk may sit just
/// below `U_{nu-1}` and step over the lowered boundary.
fn upper_candidate(table: &BoundaryTable, nu: u64) -> Estimate {
    let u = table.upper(nu).expect("extended");
    let prev = if nu > 1 { table.upper(nu - 1).expect("extended") } else { u };
    Estimate::new(u.max(prev).clamp(0, nu as i64) as u64, nu)
}

/// Lower end of the estimates at step `nu`: `L_nu / nu`, widened to
/// `(L_{nu-1} + 1) / nu` where the boundary jumps by more than one.
fn lower_candidate(table: &BoundaryTable, nu: u64) -> Estimate {
    let l = table.lower(nu).expect("extended");
    let prev = if nu > 1 { table.lower(nu - 1).expect("extended") + 1 } else { l };
    Estimate::new(l.min(prev).clamp(0, nu as i64) as u64, nu)
}

fn widen(lo: &mut Estimate, hi: &mut Estimate, table: &BoundaryTable, nu: u64) {
    *lo = (*lo).min(lower_candidate(table, nu));
    *hi = (*hi).max(upper_candidate(table, nu));
}

/// Bounds `[p_min, p_max]` for the eventual estimate given `tau >= n`.
///
/// Stops at steps `n..=m` are inspected directly. Stops after `m` are
/// bounded through `S_nu <= U_{nu-1} <= alpha (nu-1) + Delta_{nu-1} + 1`
/// (and its mirror), whose
/// envelope `alpha +- (Delta_m + 1) / m` decreases in `m` for the default
/// spending sequence. The look-ahead `m - n` starts at `window` (default
/// `ceil(2 / alpha)`) and doubles until the envelope lies inside the
/// directly inspected range, so the result never depends on the unproved
/// monotonicity of `U_nu / nu`.
///
/// For tabulated spending the sequence ends at the table, so every
/// remaining step is inspected and no envelope is needed.
pub fn interim_interval(table: &mut BoundaryTable, n: u64, window: Option<u64>) -> Result<InterimInterval> {
    if n == 0 {
        return Err(crate::error::invalid("interim interval needs n >= 1"));
    }
    let alpha = table.alpha();
    if let SpendingKind::Custom { values } = table.spending().kind() {
        let end = values.len() as u64;
        table.extend_to(end)?;
        let (mut lo, mut hi) = (Estimate::ONE, Estimate::ZERO);
        for nu in n..=end {
            widen(&mut lo, &mut hi, table, nu);
        }
        // Runs cannot continue past the table; a run truncated there reports
        // its running estimate.
        let (l, u) = table.bounds(end).expect("extended");
        lo = lo.min(Estimate::new((l + 1).max(0) as u64, end));
        hi = hi.max(Estimate::new((u - 1).min(end as i64).max(0) as u64, end));
        return Ok(InterimInterval { n, lower: lo, upper: hi, lookahead: end });
    }

    let mut window = window.unwrap_or_else(|| (2.0 / alpha).ceil() as u64);
    let (mut lo, mut hi) = (Estimate::ONE, Estimate::ZERO);
    let mut inspected = n - 1;
    loop {
        let m = n + window;
        table.extend_to(m)?;
        for nu in inspected + 1..=m {
            widen(&mut lo, &mut hi, table, nu);
        }
        inspected = m;
        let reach = (table.delta(m)? + 1.0) / m as f64;
        let env_hi = Estimate::ceil_of(alpha + reach);
        let env_lo = Estimate::floor_of(alpha - reach);
        if (env_hi <= hi && env_lo >= lo) || m >= LOOKAHEAD_CAP {
            return Ok(InterimInterval { n, lower: lo.min(env_lo), upper: hi.max(env_hi), lookahead: m });
        }
        window = (window * 2).max(1);
    }
}

/// The cruder interval `alpha +- (Delta_n + 1) / n`, clamped to `[0, 1]`.
pub fn coarse_interval(table: &BoundaryTable, n: u64) -> Result<(f64, f64)> {
    let reach = (table.delta(n)? + 1.0) / n as f64;
    let alpha = table.alpha();
    Ok(((alpha - reach).max(0.0), (alpha + reach).min(1.0)))
}

/// Boundary tables keyed by threshold, sharing one spending sequence.
#[derive(Debug)]
pub struct TableCache {
    spending: SpendingSequence,
    tables: Mutex<HashMap<(u64, String, u64), TableHandle>>,
}

impl TableCache {
    pub fn new(spending: SpendingSequence) -> Self {
        TableCache { spending, tables: Mutex::new(HashMap::new()) }
    }

    pub fn spending(&self) -> &SpendingSequence {
        &self.spending
    }

    pub fn get(&self, alpha: f64) -> Result<TableHandle> {
        let key = (alpha.to_bits(), self.spending.descriptor(), self.spending.epsilon().to_bits());
        let mut tables = self.tables.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(h) = tables.get(&key) {
            return Ok(h.clone());
        }
        let handle = TableHandle::new(BoundaryTable::new(alpha, self.spending.clone())?);
        tables.insert(key, handle.clone());
        Ok(handle)
    }

    pub fn len(&self) -> usize {
        self.tables.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies the procedure with threshold `threshold` to `source` and returns
/// the estimate; a stream that ends (or hits `max_steps`) before a stop
/// yields the running estimate `S_n / n`.
pub fn h_alpha<S: BitSource>(cache: &TableCache, threshold: f64, source: S, max_steps: Option<u64>) -> Result<f64> {
    let table = cache.get(threshold)?;
    let opts = RunOptions { max_steps, ..Default::default() };
    Ok(run(&table, source, &opts, &mut |_| {})?.p_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{BernoulliSource, FnSource, SliceSource, SourceError};

    fn handle() -> TableHandle {
        TableHandle::new(BoundaryTable::new(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap()).unwrap())
    }

    #[test]
    fn interior_step_continues() {
        let mut r = Runner::new(handle());
        assert!(matches!(r.step(true).unwrap(), Step::Continue(RunState { n: 1, s: 1 })));
        assert!(matches!(r.step(false).unwrap(), Step::Continue(RunState { n: 2, s: 1 })));
    }

    #[test]
    fn all_ones_stop_upper_at_first_reachable_boundary() {
        let h = handle();
        let res = run(&h, BernoulliSource::new(1.0, 0), &RunOptions::default(), &mut |_| {}).unwrap();
        let t = h.read();
        let first = (1..).find(|&n| t.upper(n).unwrap() <= n as i64).unwrap();
        assert_eq!(res.status, RunStatus::Stopped { tau: first, s_tau: first, side: Side::Upper });
        assert_eq!(res.p_hat, 1.0);
    }

    #[test]
    fn all_zeros_stop_lower_at_first_nonnegative_lower() {
        let h = handle();
        let res = run(&h, BernoulliSource::new(0.0, 0), &RunOptions::default(), &mut |_| {}).unwrap();
        let t = h.read();
        let first = (1..).find(|&n| t.lower(n).unwrap() >= 0).unwrap();
        assert_eq!(res.status, RunStatus::Stopped { tau: first, s_tau: 0, side: Side::Lower });
        assert_eq!(res.p_hat, 0.0);
    }

    #[test]
    fn truncation_reports_running_estimate() {
        // Alternate 1 in 20 so the walk tracks n * alpha and never exits.
        let mut i = 0u64;
        let src = FnSource(move || {
            i += 1;
            Ok(Some(i % 20 == 0))
        });
        let opts = RunOptions { max_steps: Some(1000), ..Default::default() };
        let res = run(&handle(), src, &opts, &mut |_| {}).unwrap();
        assert_eq!(res.status, RunStatus::Truncated { n: 1000, s: 50 });
        assert_eq!(res.p_hat, 0.05);
    }

    #[test]
    fn source_failure_exposes_partial_state() {
        let mut i = 0;
        let src = FnSource(move || {
            i += 1;
            if i > 3 {
                Err(SourceError("boom".into()))
            } else {
                Ok(Some(true))
            }
        });
        match run(&handle(), src, &RunOptions::default(), &mut |_| {}) {
            Err(Error::Source { n: 3, s: 3, message }) => assert_eq!(message, "boom"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_stream_is_an_error() {
        let r = run(&handle(), SliceSource::new(&[]), &RunOptions::default(), &mut |_| {});
        assert!(matches!(r, Err(Error::EmptyStream)));
    }

    #[test]
    fn reporting_does_not_change_result() {
        let h = handle();
        let quiet = run(&h, BernoulliSource::new(0.07, 5), &RunOptions::default(), &mut |_| {}).unwrap();
        let mut records = Vec::new();
        let opts = RunOptions {
            report: ReportEvery { steps: Some(100), wall: Some(Duration::from_millis(1)) },
            ..Default::default()
        };
        let loud = run(&h, BernoulliSource::new(0.07, 5), &opts, &mut |p| records.push(*p)).unwrap();
        assert_eq!(quiet, loud);
        assert!(!records.is_empty());
        for p in &records {
            assert!(p.p_min <= p.p_max);
        }
    }

    #[test]
    fn h_alpha_finite_sequence() {
        let cache = TableCache::new(SpendingSequence::new_default(1e-3, 1000).unwrap());
        let bits = [true, false, false, true, false];
        let est = h_alpha(&cache, 0.3, SliceSource::new(&bits), None).unwrap();
        assert_eq!(est, 0.4);
        let est = h_alpha(&cache, 0.5, BernoulliSource::new(1.0, 1), None).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(cache.len(), 2);
        cache.get(0.3).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn interim_single_step_window_covers_current_boundaries() {
        let h = handle();
        let mut t = h.write();
        let iv = interim_interval(&mut t, 500, Some(0)).unwrap();
        let (l, u) = t.bounds(500).unwrap();
        assert!(iv.lower.value() <= (l.max(0) as f64) / 500.0);
        assert!(iv.upper.value() >= u as f64 / 500.0);
    }

    #[test]
    fn coarse_interval_contains_interim() {
        let h = handle();
        let mut t = h.write();
        let iv = interim_interval(&mut t, 1000, None).unwrap();
        let (lo, hi) = coarse_interval(&t, 1000).unwrap();
        assert!(lo <= iv.lower_value() && iv.upper_value() <= hi);
    }
}

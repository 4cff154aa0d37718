//! Exact evaluation of the procedure under an arbitrary true `p`.
//!
//! Everything here is a forward recursion over the lattice of partial sums
//! with the boundaries held fixed. The recursion is necessarily truncated at
//! some horizon, so every answer carries the unstopped mass (`residual`)
//! and probabilities are reported as brackets rather than point values.

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::boundary::{BoundaryTable, TableHandle};
use crate::error::{invalid, Error, Result};
use crate::estimate::Estimate;
use crate::runner::{interim_interval, InterimInterval, RunResult, RunStatus, Side};

/// Entries below this are flushed to zero; keeps the recursion out of
/// subnormal arithmetic once the mass has drained away.
const FLUSH: f64 = 1e-300;

/// Distribution of the unstopped partial sum under Bernoulli(p).
#[derive(Debug, Clone)]
struct Walk {
    p: f64,
    n: u64,
    /// Partial sum of `mass[0]`.
    start: i64,
    mass: Vec<f64>,
}

impl Walk {
    fn new(p: f64) -> Self {
        Walk { p, n: 0, start: 0, mass: vec![1.0] }
    }

    fn alive(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Advances to step `to`. `on_stop(n, s, side, prob)` sees every
    /// stopped lattice point; `on_alive(n, mass)` sees `P(tau > n)` after
    /// each step.
    fn advance(
        &mut self,
        table: &BoundaryTable,
        to: u64,
        on_stop: &mut dyn FnMut(u64, u64, Side, f64),
        mut on_alive: Option<&mut dyn FnMut(u64, f64)>,
    ) {
        let (p, q) = (self.p, 1.0 - self.p);
        while self.n < to {
            if self.mass.is_empty() {
                if let Some(f) = on_alive.as_mut() {
                    for n in self.n + 1..=to {
                        f(n, 0.0);
                    }
                }
                self.n = to;
                return;
            }
            let n = self.n + 1;
            let (lower, upper) = table.bounds(n).expect("table covers the horizon");

            let m = &mut self.mass;
            m.push(0.0);
            for i in (1..m.len()).rev() {
                let v = m[i] * q + m[i - 1] * p;
                m[i] = if v < FLUSH { 0.0 } else { v };
            }
            m[0] = if m[0] * q < FLUSH { 0.0 } else { m[0] * q };

            let top = self.start + m.len() as i64 - 1;
            // Upper stops, j >= U_n.
            if top >= upper {
                let first = (upper - self.start).max(0) as usize;
                for (i, &v) in m.iter().enumerate().skip(first) {
                    if v > 0.0 {
                        on_stop(n, (self.start + i as i64) as u64, Side::Upper, v);
                    }
                }
                m.truncate(first);
            }
            // Lower stops, j <= L_n.
            if self.start <= lower {
                let last = ((lower - self.start + 1) as usize).min(m.len());
                for (i, &v) in m[..last].iter().enumerate() {
                    if v > 0.0 {
                        on_stop(n, (self.start + i as i64) as u64, Side::Lower, v);
                    }
                }
                m.drain(..last);
                self.start = lower + 1;
            }
            // Trim drained tails.
            let lead = m.iter().take_while(|&&v| v == 0.0).count();
            if lead > 0 {
                m.drain(..lead);
                self.start += lead as i64;
            }
            while m.last() == Some(&0.0) {
                m.pop();
            }
            self.n = n;
            if let Some(f) = on_alive.as_mut() {
                f(n, m.iter().sum());
            }
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("p must lie in [0, 1], got {p}")))
    }
}

fn check_horizon(table: &BoundaryTable, horizon: u64) -> Result<()> {
    if horizon > table.n_max() {
        Err(Error::HorizonBeyondTable { horizon, n_max: table.n_max() })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Outcome {
    pub tau: u64,
    pub s_tau: u64,
    pub side: Side,
    pub prob: f64,
}

impl Outcome {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.s_tau, self.tau)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutcomeDistribution {
    pub p: f64,
    pub horizon: u64,
    pub outcomes: Vec<Outcome>,
    /// `P_p(tau > horizon)`.
    pub residual: f64,
}

impl OutcomeDistribution {
    pub fn stopped_mass(&self, side: Side) -> f64 {
        self.outcomes.iter().filter(|o| o.side == side).map(|o| o.prob).sum()
    }

    pub fn total(&self) -> f64 {
        self.outcomes.iter().map(|o| o.prob).sum::<f64>() + self.residual
    }
}

/// Law of `(tau, S_tau)` on `{tau <= horizon}` under Bernoulli(p).
pub fn outcome_distribution(table: &BoundaryTable, p: f64, horizon: u64) -> Result<OutcomeDistribution> {
    check_p(p)?;
    check_horizon(table, horizon)?;
    let mut walk = Walk::new(p);
    let mut outcomes = Vec::new();
    walk.advance(table, horizon, &mut |tau, s_tau, side, prob| outcomes.push(Outcome { tau, s_tau, side, prob }), None);
    Ok(OutcomeDistribution { p, horizon, outcomes, residual: walk.alive() })
}

/// Bracket on the resampling risk `RR_p`: `P_p(p_hat > alpha)` for
/// `p <= alpha`, `P_p(p_hat <= alpha)` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskBound {
    pub p: f64,
    /// Wrong-side mass that has already stopped.
    pub lower: f64,
    /// `lower + residual`.
    pub upper: f64,
    pub residual: f64,
    pub horizon: u64,
}

/// `E_p(min(tau, horizon)) = sum_{n < horizon} P_p(tau > n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopTime {
    pub p: f64,
    pub value: f64,
    /// `P_p(tau > horizon)`; the truncation gap.
    pub residual: f64,
    pub horizon: u64,
}

/// Stops with `p_hat > alpha` are exactly the upper stops, because
/// `L_n < n alpha < U_n`.
fn wrong_side(p: f64, alpha: f64) -> Side {
    if p <= alpha {
        Side::Upper
    } else {
        Side::Lower
    }
}

pub fn resampling_risk(table: &BoundaryTable, p: f64, horizon: u64) -> Result<RiskBound> {
    let dist = outcome_distribution(table, p, horizon)?;
    let lower = dist.stopped_mass(wrong_side(p, table.alpha()));
    Ok(RiskBound { p, lower, upper: lower + dist.residual, residual: dist.residual, horizon })
}

pub fn expected_stop_time(table: &BoundaryTable, p: f64, horizon: u64) -> Result<StopTime> {
    check_p(p)?;
    check_horizon(table, horizon)?;
    let mut walk = Walk::new(p);
    // P(tau > 0) = 1.
    let mut value = 1.0;
    walk.advance(
        table,
        horizon,
        &mut |_, _, _, _| {},
        Some(&mut |n, alive| {
            if n < horizon {
                value += alive
            }
        }),
    );
    Ok(StopTime { p, value, residual: walk.alive(), horizon })
}

/// How far to push truncated recursions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonPolicy {
    pub initial: u64,
    pub max: u64,
    /// Doubling stops once the unstopped mass is below this.
    pub residual_target: f64,
}

impl Default for HorizonPolicy {
    fn default() -> Self {
        HorizonPolicy { initial: 100_000, max: 1 << 21, residual_target: 1e-8 }
    }
}

/// Risk bracket and expected stopping time from one recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointSummary {
    pub risk: RiskBound,
    pub stop_time: StopTime,
}

/// Runs the recursion at `p`, doubling the horizon from `policy.initial`
/// until the residual drops below `policy.residual_target` or `policy.max`
/// is reached. At `p = alpha` the residual does not vanish, so no doubling
/// is attempted there.
pub fn summarize(handle: &TableHandle, p: f64, policy: &HorizonPolicy) -> Result<PointSummary> {
    check_p(p)?;
    let alpha = handle.alpha();
    let side = wrong_side(p, alpha);
    let mut walk = Walk::new(p);
    let mut wrong = 0.0;
    let mut e_tau = 1.0;
    let mut horizon = policy.initial.max(1).min(policy.max.max(1));
    loop {
        handle.ensure(horizon)?;
        {
            let table = handle.read();
            walk.advance(
                &table,
                horizon,
                &mut |_, _, s, prob| {
                    if s == side {
                        wrong += prob
                    }
                },
                Some(&mut |n, alive| {
                    if n < horizon {
                        e_tau += alive
                    }
                }),
            );
        }
        let residual = walk.alive();
        if residual < policy.residual_target || p == alpha || horizon >= policy.max {
            return Ok(PointSummary {
                risk: RiskBound { p, lower: wrong, upper: wrong + residual, residual, horizon },
                stop_time: StopTime { p, value: e_tau, residual, horizon },
            });
        }
        // The alive mass at `horizon` enters the sum of the next round.
        e_tau += residual;
        horizon = (horizon * 2).min(policy.max);
    }
}

pub fn resampling_risk_auto(handle: &TableHandle, p: f64, policy: &HorizonPolicy) -> Result<RiskBound> {
    Ok(summarize(handle, p, policy)?.risk)
}

pub fn expected_stop_time_auto(handle: &TableHandle, p: f64, policy: &HorizonPolicy) -> Result<StopTime> {
    Ok(summarize(handle, p, policy)?.stop_time)
}

/// One row of a risk / stopping-time curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub p: f64,
    pub rr_lower: f64,
    pub rr_upper: f64,
    pub e_tau: f64,
    pub residual: f64,
    pub horizon: u64,
    /// `None` at `p = alpha`, where the bound diverges.
    pub wald_bound: Option<f64>,
}

/// Evaluates [`summarize`] over `grid` on up to `threads` worker threads.
/// Rows come back in grid order regardless of scheduling.
pub fn curve(handle: &TableHandle, grid: &[f64], policy: &HorizonPolicy, threads: usize) -> Result<Vec<CurveRow>> {
    let alpha = handle.alpha();
    let eps = handle.read().epsilon();
    // Extend once up front so workers mostly share read access.
    handle.ensure(policy.initial.min(policy.max))?;
    let row = |p: f64| -> Result<CurveRow> {
        let s = summarize(handle, p, policy)?;
        Ok(CurveRow {
            p,
            rr_lower: s.risk.lower,
            rr_upper: s.risk.upper,
            e_tau: s.stop_time.value,
            residual: s.risk.residual,
            horizon: s.risk.horizon,
            wald_bound: wald_lower_bound(p, eps, alpha).ok(),
        })
    };
    let threads = threads.max(1).min(grid.len().max(1));
    if threads == 1 {
        return grid.iter().map(|&p| row(p)).collect();
    }
    let mut slots: Vec<Option<Result<CurveRow>>> = (0..grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> =
            slots.chunks_mut(grid.len().div_ceil(threads)).zip(grid.chunks(grid.len().div_ceil(threads))).collect();
        for (out, ps) in chunks {
            let row = &row;
            scope.spawn(move || {
                for (slot, &p) in out.iter_mut().zip(ps) {
                    *slot = Some(row(p));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Wald's approximation to the expected sample size of the SPRT of
/// `p = alpha` against `p = p0` with both error probabilities `eps`; a
/// lower bound (up to the approximation) on `E_{p0}(tau)` for any procedure
/// whose resampling risk is uniformly at most `eps`.
pub fn wald_lower_bound(p0: f64, eps: f64, alpha: f64) -> Result<f64> {
    check_p(p0)?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(invalid(format!("epsilon must lie in (0, 1/2), got {eps}")));
    }
    if p0 == alpha {
        return Err(invalid("Wald bound diverges at p0 = alpha"));
    }
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * y.ln() };
    let num = (1.0 - eps) * ((1.0 - eps) / eps).ln() + eps * (eps / (1.0 - eps)).ln();
    let kl = xlogy(p0, p0 / alpha) + xlogy(1.0 - p0, (1.0 - p0) / (1.0 - alpha));
    Ok(num / kl)
}

/// Resampling risk of the fixed-`n` estimator `S_n / n`:
/// `P(Bin(n, p) <= floor(n alpha))` for `p > alpha`, else
/// `P(Bin(n, p) > floor(n alpha))`.
pub fn naive_risk(p: f64, n: u64, alpha: f64) -> Result<f64> {
    check_p(p)?;
    if n == 0 {
        return Err(invalid("naive estimator needs n >= 1"));
    }
    let cut = (n as f64 * alpha).floor() as u64;
    let bin = Binomial::new(p, n).map_err(|e| invalid(e.to_string()))?;
    Ok(if p > alpha { bin.cdf(cut) } else { bin.sf(cut) })
}

/// Which tail is summed when evaluating `P_p(p_hat >= x)` or
/// `P_p(p_hat <= x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CiRoute {
    /// Sum whichever of the event and its complement has less stopped mass.
    #[default]
    Auto,
    Direct,
    /// `1 - P(complement)`.
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiOptions {
    /// The interval has nominal coverage `1 - beta`.
    pub beta: f64,
    /// Bisection tolerance in `p`.
    pub tolerance: f64,
    pub policy: HorizonPolicy,
    pub route: CiRoute,
    /// Fail instead of returning an uncertified (wider) interval.
    pub require_certified: bool,
}

impl CiOptions {
    pub fn new(beta: f64) -> Self {
        CiOptions {
            beta,
            tolerance: 1e-6,
            policy: HorizonPolicy { initial: 1024, ..HorizonPolicy::default() },
            route: CiRoute::Auto,
            require_certified: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub p_obs: f64,
    pub beta: f64,
    pub p_low: f64,
    pub p_high: f64,
    /// Largest recursion horizon used.
    pub horizon: u64,
    /// Both limits were enclosed within the tolerance.
    pub certified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    AtLeast,
    AtMost,
}

impl Event {
    fn holds(self, s: u64, n: u64, x: Estimate) -> bool {
        let ord = x.cmp_fraction(s, n);
        match self {
            Event::AtLeast => ord.is_ge(),
            Event::AtMost => ord.is_le(),
        }
    }
}

/// Where the mass still unstopped at the horizon will end up relative to
/// the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Residual {
    Inside,
    Outside,
    Unknown,
}

fn classify(event: Event, x: Estimate, eventual: &InterimInterval) -> Residual {
    let (lo, hi) = (eventual.lower, eventual.upper);
    match event {
        Event::AtLeast if lo >= x => Residual::Inside,
        Event::AtLeast if hi < x => Residual::Outside,
        Event::AtMost if hi <= x => Residual::Inside,
        Event::AtMost if lo > x => Residual::Outside,
        _ => Residual::Unknown,
    }
}

/// `[lo, hi]` bracket on `P_p(event)` at a fixed horizon.
fn event_bracket(
    table: &BoundaryTable,
    p: f64,
    horizon: u64,
    event: Event,
    x: Estimate,
    residual_class: Residual,
    route: CiRoute,
) -> (f64, f64) {
    let mut walk = Walk::new(p);
    let (mut inside, mut outside) = (0.0, 0.0);
    walk.advance(
        table,
        horizon,
        &mut |n, s, _, prob| {
            if event.holds(s, n, x) {
                inside += prob
            } else {
                outside += prob
            }
        },
        None,
    );
    let residual = walk.alive();
    let (res_in, res_unknown) = match residual_class {
        Residual::Inside => (residual, 0.0),
        Residual::Outside => (0.0, 0.0),
        Residual::Unknown => (0.0, residual),
    };
    let direct = match route {
        CiRoute::Direct => true,
        CiRoute::Complement => false,
        CiRoute::Auto => inside <= outside,
    };
    let lo = if direct { inside + res_in } else { 1.0 - outside - residual + res_in };
    (lo.clamp(0.0, 1.0), (lo + res_unknown).clamp(0.0, 1.0))
}

/// Smallest horizon (doubling from `policy.initial`) at which the eventual
/// estimate of every still-running path is known to be on one side of `x`.
fn classifying_horizon(
    handle: &TableHandle,
    event: Event,
    x: Estimate,
    policy: &HorizonPolicy,
) -> Result<(u64, Residual)> {
    let mut h = policy.initial.max(1).min(policy.max);
    loop {
        let eventual = interim_interval(&mut handle.write(), h + 1, None)?;
        let class = classify(event, x, &eventual);
        if class != Residual::Unknown || h >= policy.max {
            return Ok((h, class));
        }
        h = (h * 2).min(policy.max);
    }
}

/// Bisection for the `p` where a monotone function of `p` crosses `target`.
/// `increasing` gives the direction.
fn bisect(mut f: impl FnMut(f64) -> f64, target: f64, increasing: bool, tol: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let above = f(mid) > target;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves `P_p(event) = beta / 2` for `p`. Returns the conservative root
/// (outer end of the enclosure), the enclosure width and the horizon.
fn solve_limit(handle: &TableHandle, event: Event, x: Estimate, opts: &CiOptions) -> Result<(f64, f64, u64)> {
    let target = opts.beta / 2.0;
    let (horizon, class) = classifying_horizon(handle, event, x, &opts.policy)?;
    let table = handle.read();
    let increasing = event == Event::AtLeast;
    let eval = |p: f64, pick_hi: bool| {
        let (lo, hi) = event_bracket(&table, p, horizon, event, x, class, opts.route);
        if pick_hi {
            hi
        } else {
            lo
        }
    };
    let root_hi = bisect(|p| eval(p, true), target, increasing, opts.tolerance);
    let root_lo = if class == Residual::Unknown {
        bisect(|p| eval(p, false), target, increasing, opts.tolerance)
    } else {
        root_hi
    };
    let width = (root_hi - root_lo).abs();
    // For the lower limit (increasing) the upper bracket gives the smaller
    // root; for the upper limit the lower bracket gives the larger one.
    let conservative = if increasing { root_hi.min(root_lo) } else { root_hi.max(root_lo) };
    Ok((conservative, width, horizon))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("beta must lie in (0, 1), got {beta}")))
    }
}

fn interval_between(
    handle: &TableHandle,
    x_low: Estimate,
    x_high: Estimate,
    p_obs: f64,
    opts: &CiOptions,
) -> Result<ConfidenceInterval> {
    check_beta(opts.beta)?;
    let mut horizon = 0;
    let mut worst = 0.0f64;
    let p_low = if x_low == Estimate::ZERO {
        0.0
    } else {
        let (root, width, h) = solve_limit(handle, Event::AtLeast, x_low, opts)?;
        horizon = horizon.max(h);
        worst = worst.max(width);
        root
    };
    let p_high = if x_high == Estimate::ONE {
        1.0
    } else {
        let (root, width, h) = solve_limit(handle, Event::AtMost, x_high, opts)?;
        horizon = horizon.max(h);
        worst = worst.max(width);
        root
    };
    let certified = worst <= 2.0 * opts.tolerance;
    if !certified && opts.require_certified {
        return Err(Error::Uncertified { horizon, width: worst, tolerance: opts.tolerance });
    }
    Ok(ConfidenceInterval { p_obs, beta: opts.beta, p_low, p_high, horizon, certified })
}

/// `1 - beta` confidence interval for `p` from a stopped run: `p_low`
/// solves `P_p(p_hat >= p_obs) = beta/2` and `p_high` solves
/// `P_p(p_hat <= p_obs) = beta/2`, with `p_low = 0` when `p_obs = 0` and
/// `p_high = 1` when `p_obs = 1`. Estimates are ordered as exact fractions
/// and ties count towards the event.
pub fn confidence_interval(handle: &TableHandle, observed: &RunResult, opts: &CiOptions) -> Result<ConfidenceInterval> {
    let x = match observed.status {
        RunStatus::Stopped { tau, s_tau, .. } => Estimate::new(s_tau, tau),
        RunStatus::Truncated { n, .. } => {
            return Err(invalid(format!("run was truncated at n = {n}; use confidence_interval_running")))
        }
    };
    interval_between(handle, x, x, observed.p_hat, opts)
}

/// Interval for a run that has not stopped by step `n`: the limits are
/// computed with `p_obs` replaced by the interim bounds, which yields an
/// interval containing the one available after stopping.
pub fn confidence_interval_running(
    handle: &TableHandle,
    n: u64,
    s: u64,
    opts: &CiOptions,
) -> Result<ConfidenceInterval> {
    let interim = interim_interval(&mut handle.write(), n, None)?;
    interval_between(handle, interim.lower, interim.upper, s as f64 / n.max(1) as f64, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spending::SpendingSequence;

    fn table(n: u64) -> BoundaryTable {
        BoundaryTable::build(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap(), n).unwrap()
    }

    #[test]
    fn distribution_sums_to_one() {
        let t = table(3000);
        for p in [0.0, 0.01, 0.05, 0.2, 1.0] {
            let d = outcome_distribution(&t, p, 3000).unwrap();
            assert!((d.total() - 1.0).abs() < 1e-10, "p={p}: {}", d.total());
            assert!(d.residual >= 0.0);
            for o in &d.outcomes {
                let (l, u) = t.bounds(o.tau).unwrap();
                match o.side {
                    Side::Upper => assert!(o.s_tau as i64 >= u),
                    Side::Lower => assert!(o.s_tau as i64 <= l),
                }
            }
        }
    }

    #[test]
    fn certain_paths() {
        let t = table(500);
        let first_up = (1..).find(|&n| t.upper(n).unwrap() <= n as i64).unwrap();
        let d = outcome_distribution(&t, 1.0, 500).unwrap();
        assert_eq!(d.outcomes.len(), 1);
        assert_eq!((d.outcomes[0].tau, d.outcomes[0].prob), (first_up, 1.0));
        let e = expected_stop_time(&t, 1.0, 500).unwrap();
        assert_eq!(e.value, first_up as f64);

        let r = resampling_risk(&t, 0.0, 500).unwrap();
        assert_eq!(r.lower, 0.0);
        assert_eq!(r.upper, r.residual);
    }

    #[test]
    fn horizon_beyond_table() {
        let t = table(100);
        assert!(matches!(
            outcome_distribution(&t, 0.1, 101),
            Err(Error::HorizonBeyondTable { horizon: 101, n_max: 100 })
        ));
    }

    #[test]
    fn walk_at_alpha_matches_table_hits() {
        let t = table(4000);
        let d = outcome_distribution(&t, 0.05, 4000).unwrap();
        let mut up = 0.0;
        let mut low = 0.0;
        let mut by_n = d.outcomes.iter().peekable();
        for n in 1..=4000u64 {
            while let Some(o) = by_n.next_if(|o| o.tau == n) {
                match o.side {
                    Side::Upper => up += o.prob,
                    Side::Lower => low += o.prob,
                }
            }
            assert!((up - t.hit_upper(n).unwrap()).abs() < 1e-12, "n={n}");
            assert!((low - t.hit_lower(n).unwrap()).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn stop_time_is_sum_of_survival() {
        let t = table(2000);
        let d = outcome_distribution(&t, 0.12, 2000).unwrap();
        let e = expected_stop_time(&t, 0.12, 2000).unwrap();
        let direct: f64 = d.outcomes.iter().map(|o| o.tau as f64 * o.prob).sum::<f64>() + 2000.0 * d.residual;
        assert!((e.value - direct).abs() < 1e-6 * direct);
    }

    #[test]
    fn auto_summary_agrees_with_fixed_horizon() {
        let h = TableHandle::new(table(10));
        let policy = HorizonPolicy { initial: 1000, max: 64_000, residual_target: 1e-12 };
        let s = summarize(&h, 0.2, &policy).unwrap();
        let t = h.read();
        let fixed = expected_stop_time(&t, 0.2, s.stop_time.horizon).unwrap();
        assert!((s.stop_time.value - fixed.value).abs() < 1e-9 * fixed.value);
        let risk = resampling_risk(&t, 0.2, s.risk.horizon).unwrap();
        assert!((s.risk.lower - risk.lower).abs() < 1e-15);
    }

    #[test]
    fn wald_formula() {
        let eps: f64 = 1e-3;
        let num = 0.999 * 999f64.ln() + 0.001 * (1.0f64 / 999.0).ln();
        let den = 0.1 * 2f64.ln() + 0.9 * (0.9f64 / 0.95).ln();
        let w = wald_lower_bound(0.1, eps, 0.05).unwrap();
        assert!((w - num / den).abs() < 1e-9 * w);
        assert!(wald_lower_bound(0.05, eps, 0.05).is_err());
        assert!(wald_lower_bound(0.1, 1e-5, 0.05).unwrap() > w);
        // Near alpha the bound behaves like 2 alpha (1 - alpha) num / (p - alpha)^2.
        let d: f64 = 1e-4;
        let near = wald_lower_bound(0.05 + d, eps, 0.05).unwrap();
        let asym = 2.0 * 0.05 * 0.95 * num / (d * d);
        assert!((near / asym - 1.0).abs() < 1e-2);
        let below = wald_lower_bound(0.05 - d, eps, 0.05).unwrap();
        assert!((below / asym - 1.0).abs() < 1e-2);
    }

    #[test]
    fn naive_risk_edges() {
        assert_eq!(naive_risk(1.0, 57, 0.3).unwrap(), 0.0);
        assert_eq!(naive_risk(0.0, 57, 0.3).unwrap(), 0.0);
        assert!(naive_risk(0.1, 0, 0.3).is_err());
    }

    #[test]
    fn ci_edges_and_order() {
        let h = TableHandle::new(table(500));
        let opts = CiOptions::new(0.05);
        // Some lower stop with S = 0.
        let first = (1..).find(|&n| h.read().lower(n).unwrap() >= 0).unwrap();
        let zero = RunResult { status: RunStatus::Stopped { tau: first, s_tau: 0, side: Side::Lower }, p_hat: 0.0 };
        let ci = confidence_interval(&h, &zero, &opts).unwrap();
        assert_eq!(ci.p_low, 0.0);
        assert!(ci.p_high > 0.0 && ci.p_high < 0.05);

        let up = (1..).find(|&n| h.read().upper(n).unwrap() <= n as i64).unwrap();
        let one = RunResult { status: RunStatus::Stopped { tau: up, s_tau: up, side: Side::Upper }, p_hat: 1.0 };
        let ci = confidence_interval(&h, &one, &opts).unwrap();
        assert_eq!(ci.p_high, 1.0);
        assert!(ci.p_low > 0.05);
    }

    #[test]
    fn ci_rejects_truncated_runs() {
        let h = TableHandle::new(table(10));
        let r = RunResult { status: RunStatus::Truncated { n: 10, s: 1 }, p_hat: 0.1 };
        assert!(confidence_interval(&h, &r, &CiOptions::new(0.05)).is_err());
    }
}

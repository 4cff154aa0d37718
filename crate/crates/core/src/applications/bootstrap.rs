//! Parametric bootstrap tests driven by the sequential procedure, and their
//! nested uses: level checks, the double bootstrap and the level check of
//! the double bootstrap.
//!
//! Every table drawn at any nesting depth is charged to a [`SampleCounter`]
//! so the totals of a study are exact.

use std::cell::{Cell, RefCell};

use serde::Serialize;

use super::contingency::{chisq_critical, lrt_statistic, ContingencyTable, NullModel};
use crate::error::{invalid, Result};
use crate::estimate::Estimate;
use crate::runner::{run, RunOptions, RunResult, TableCache};
use crate::source::{FnSource, SimRng, SourceError};

/// Relative slack in `T(A_i) >= T(A)`, so that tables with the same
/// statistic up to rounding count as ties.
const TIE_SLACK: f64 = 1e-9;

fn at_least(t: f64, t_obs: f64) -> bool {
    t >= t_obs - TIE_SLACK * t_obs.abs().max(1.0)
}

/// Number of tables drawn at each nesting depth; depth 0 is the outermost
/// loop.
#[derive(Debug, Default)]
pub struct SampleCounter {
    levels: [Cell<u64>; 4],
}

impl SampleCounter {
    fn charge(&self, depth: usize) {
        let c = &self.levels[depth];
        c.set(c.get() + 1);
    }

    pub fn snapshot(&self) -> SampleCounts {
        let levels: Vec<u64> = self.levels.iter().map(Cell::get).collect();
        let total = levels.iter().sum();
        SampleCounts { levels, total }
    }

    pub fn reset(&self) {
        self.levels.iter().for_each(|c| c.set(0));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleCounts {
    pub levels: Vec<u64>,
    pub total: u64,
}

/// A data table together with the machinery for bootstrapping it: the
/// fitted null model, a boundary table cache, the generator and the
/// sample counter.
pub struct Study<'a> {
    data: ContingencyTable,
    model: NullModel,
    t_obs: f64,
    cache: &'a TableCache,
    rng: RefCell<SimRng>,
    counter: SampleCounter,
}

/// Result of [`Study::double_bootstrap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoubleBootstrap {
    /// First-stage bootstrap p-value, used as the inner threshold.
    pub first_stage: f64,
    pub run: RunResult,
}

impl<'a> Study<'a> {
    pub fn new(data: ContingencyTable, cache: &'a TableCache, rng: SimRng) -> Result<Self> {
        let model = NullModel::fit(&data)?;
        let t_obs = lrt_statistic(&data)?;
        Ok(Study { data, model, t_obs, cache, rng: RefCell::new(rng), counter: SampleCounter::default() })
    }

    pub fn data(&self) -> &ContingencyTable {
        &self.data
    }

    pub fn statistic(&self) -> f64 {
        self.t_obs
    }

    pub fn counts(&self) -> SampleCounts {
        self.counter.snapshot()
    }

    pub fn reset_counts(&self) {
        self.counter.reset()
    }

    fn draw(&self, model: &NullModel, depth: usize) -> ContingencyTable {
        self.counter.charge(depth);
        model.sample(&mut *self.rng.borrow_mut())
    }

    /// `h_alpha(1{T(A_i) >= T(A)})` with `A_i` drawn from the fitted null.
    pub fn bootstrap_pvalue(&self, alpha: f64, opts: &RunOptions) -> Result<RunResult> {
        let table = self.cache.get(alpha)?;
        let source = FnSource(|| Ok(Some(self.exceeds(&self.model, self.t_obs, 0))));
        run(&table, source, opts, &mut |_| {})
    }

    /// `(1/budget) sum 1{T(A_i) >= T(A)}` over a fixed number of draws.
    pub fn fixed_pvalue(&self, budget: u64) -> Result<f64> {
        self.fixed_pvalue_of(&self.model, self.t_obs, budget, 0).map(|(hits, n)| hits as f64 / n as f64)
    }

    fn fixed_pvalue_of(&self, model: &NullModel, t_obs: f64, budget: u64, depth: usize) -> Result<(u64, u64)> {
        if budget == 0 {
            return Err(invalid("bootstrap budget must be positive"));
        }
        let mut hits = 0;
        for _ in 0..budget {
            hits += u64::from(self.exceeds(model, t_obs, depth));
        }
        Ok((hits, budget))
    }

    fn exceeds(&self, model: &NullModel, t_obs: f64, depth: usize) -> bool {
        // Draws have the model's positive total, so the statistic exists.
        let t = lrt_statistic(&self.draw(model, depth)).expect("non-empty draw");
        at_least(t, t_obs)
    }

    /// Rejection rate of the asymptotic chi-square test at level `nominal`
    /// under the fitted null, compared with `threshold`.
    pub fn check_level(&self, nominal: f64, threshold: f64, opts: &RunOptions) -> Result<RunResult> {
        let critical = chisq_critical(nominal, self.data.df())?;
        let table = self.cache.get(threshold)?;
        let source = FnSource(|| Ok(Some(self.exceeds(&self.model, critical, 0))));
        run(&table, source, opts, &mut |_| {})
    }

    /// Inner bootstrap p-value of `a` at threshold `alpha`, truncated at
    /// `m` draws from the null fitted to `a`.
    fn inner_pvalue(&self, a: &ContingencyTable, alpha: f64, m: u64, depth: usize) -> Result<RunResult> {
        let model = NullModel::fit(a)?;
        let t_a = lrt_statistic(a)?;
        let table = self.cache.get(alpha)?;
        let opts = RunOptions { max_steps: Some(m), ..Default::default() };
        run(&table, FnSource(|| Ok(Some(self.exceeds(&model, t_a, depth)))), &opts, &mut |_| {})
    }

    /// Rejection rate of the bootstrap test at level `nominal`:
    /// `h_threshold(1{h_nominal(1{T(A_ij) >= T(A_i)})_{j<=m} <= nominal})`.
    pub fn check_level_bootstrap(&self, m: u64, nominal: f64, threshold: f64, opts: &RunOptions) -> Result<RunResult> {
        if m == 0 {
            return Err(invalid("inner truncation M must be positive"));
        }
        let table = self.cache.get(threshold)?;
        let source = FnSource(|| {
            let a_i = self.draw(&self.model, 0);
            let inner = self.inner_pvalue(&a_i, nominal, m, 1).map_err(|e| SourceError(e.to_string()))?;
            Ok(Some(inner.p_hat <= nominal))
        });
        run(&table, source, opts, &mut |_| {})
    }

    /// Double bootstrap adjusted p-value compared with `threshold`:
    /// `h_threshold(1{h_p(1{T(A_ij) >= T(A_i)})_{j<=m} <= p})`, where `p` is
    /// the bootstrap p-value from `first_stage` fixed draws.
    pub fn double_bootstrap(
        &self,
        m: u64,
        first_stage: u64,
        threshold: f64,
        opts: &RunOptions,
    ) -> Result<DoubleBootstrap> {
        if m == 0 {
            return Err(invalid("inner truncation M must be positive"));
        }
        let (hits, budget) = self.fixed_pvalue_of(&self.model, self.t_obs, first_stage, 0)?;
        let run = self.double_inner(&self.model, hits, budget, m, threshold, opts, 0)?;
        Ok(DoubleBootstrap { first_stage: hits as f64 / budget as f64, run })
    }

    /// Outer loop of the double bootstrap with draws from `model` at
    /// `depth`, inner loops one level deeper.
    #[allow(clippy::too_many_arguments)]
    fn double_inner(
        &self,
        model: &NullModel,
        hits: u64,
        budget: u64,
        m: u64,
        threshold: f64,
        opts: &RunOptions,
        depth: usize,
    ) -> Result<RunResult> {
        if hits == 0 {
            return Err(invalid("first-stage bootstrap p-value is 0; increase the first-stage budget"));
        }
        let p = Estimate::new(hits, budget);
        let outer = self.cache.get(threshold)?;
        let source = FnSource(|| {
            let a_i = self.draw(model, depth);
            let inner = self.inner_pvalue(&a_i, p.value(), m, depth + 1).map_err(|e| SourceError(e.to_string()))?;
            Ok(Some(inner.estimate() <= p))
        });
        run(&outer, source, opts, &mut |_| {})
    }

    /// Rejection rate of the double bootstrap test at level `nominal`,
    /// compared with `threshold`. For each outer table `A_i` the double
    /// bootstrap is run with its own first stage of `first_stage` draws,
    /// its outer loop truncated at `m_middle` and inner loops at `m_inner`.
    pub fn check_level_double_bootstrap(
        &self,
        m_inner: u64,
        m_middle: u64,
        first_stage: u64,
        nominal: f64,
        threshold: f64,
        opts: &RunOptions,
    ) -> Result<RunResult> {
        if m_inner == 0 || m_middle == 0 {
            return Err(invalid("truncation limits must be positive"));
        }
        let table = self.cache.get(threshold)?;
        let middle_opts = RunOptions { max_steps: Some(m_middle), ..Default::default() };
        let source = FnSource(|| {
            let fail = |e: crate::Error| SourceError(e.to_string());
            let a_i = self.draw(&self.model, 0);
            let model = NullModel::fit(&a_i).map_err(fail)?;
            let t_i = lrt_statistic(&a_i).map_err(fail)?;
            let (hits, budget) = self.fixed_pvalue_of(&model, t_i, first_stage, 1).map_err(fail)?;
            if hits == 0 {
                // A first-stage p-value of 0 rejects at any level.
                return Ok(Some(true));
            }
            let middle = self.double_inner(&model, hits, budget, m_inner, nominal, &middle_opts, 1).map_err(fail)?;
            Ok(Some(middle.p_hat <= nominal))
        });
        run(&table, source, opts, &mut |_| {})
    }
}

//! Stopping boundaries `(U_n, L_n)`.
//!
//! The boundaries are defined recursively under the null `p = alpha`:
//! `U_n` is the smallest `j >= 1` such that the mass of unstopped paths with
//! `S_n >= j`, plus all mass that already stopped on the upper boundary, is
//! at most `eps_n`; `L_n` is the largest `j` with the mirrored property.
//! Seeds are `U_1 = 2`, `L_1 = -1`.
//!
//! The table keeps the integer boundaries, the cumulative hit probabilities
//! per step, and only the *current* distribution of the unstopped partial
//! sum (the "alive" mass). Memory is therefore proportional to `U_n - L_n`
//! plus two integers and two floats per step.

use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::spending::SpendingSequence;

/// One step of the boundary table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryRow {
    pub n: u64,
    pub lower: i64,
    pub upper: i64,
    pub eps: f64,
    /// `P_alpha(tau <= n, S_tau <= L_tau)`
    pub hit_lower: f64,
    /// `P_alpha(tau <= n, S_tau >= U_tau)`
    pub hit_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTable {
    alpha: f64,
    spending: SpendingSequence,
    upper: Vec<i64>,
    lower: Vec<i64>,
    hit_upper: Vec<f64>,
    hit_lower: Vec<f64>,
    /// Partial sum value of `alive_mass[0]`; always `L_{n_max} + 1`.
    alive_start: i64,
    /// `P_alpha(tau > n_max, S_{n_max} = alive_start + i)`.
    alive_mass: Vec<f64>,
}

impl BoundaryTable {
    /// A table holding only the seed step `n = 1`.
    pub fn new(alpha: f64, spending: SpendingSequence) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(BoundaryTable {
            alpha,
            spending,
            upper: vec![2],
            lower: vec![-1],
            hit_upper: vec![0.0],
            hit_lower: vec![0.0],
            alive_start: 0,
            alive_mass: vec![1.0 - alpha, alpha],
        })
    }

    /// Builds and extends in one go.
    pub fn build(alpha: f64, spending: SpendingSequence, n: u64) -> Result<Self> {
        let mut table = Self::new(alpha, spending)?;
        table.extend_to(n)?;
        Ok(table)
    }

    pub(crate) fn from_parts(
        alpha: f64,
        spending: SpendingSequence,
        rows: Vec<BoundaryRow>,
        alive_start: i64,
        alive_mass: Vec<f64>,
    ) -> Self {
        let mut table = BoundaryTable {
            alpha,
            spending,
            upper: Vec::with_capacity(rows.len()),
            lower: Vec::with_capacity(rows.len()),
            hit_upper: Vec::with_capacity(rows.len()),
            hit_lower: Vec::with_capacity(rows.len()),
            alive_start,
            alive_mass,
        };
        for r in rows {
            table.upper.push(r.upper);
            table.lower.push(r.lower);
            table.hit_upper.push(r.hit_upper);
            table.hit_lower.push(r.hit_lower);
        }
        table
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spending(&self) -> &SpendingSequence {
        &self.spending
    }

    pub fn epsilon(&self) -> f64 {
        self.spending.epsilon()
    }

    pub fn n_max(&self) -> u64 {
        self.upper.len() as u64
    }

    /// `(L_n, U_n)`, if computed.
    pub fn bounds(&self, n: u64) -> Option<(i64, i64)> {
        let i = (n as usize).checked_sub(1)?;
        Some((*self.lower.get(i)?, *self.upper.get(i)?))
    }

    pub fn upper(&self, n: u64) -> Option<i64> {
        self.bounds(n).map(|b| b.1)
    }

    pub fn lower(&self, n: u64) -> Option<i64> {
        self.bounds(n).map(|b| b.0)
    }

    pub fn upper_slice(&self) -> &[i64] {
        &self.upper
    }

    pub fn lower_slice(&self) -> &[i64] {
        &self.lower
    }

    pub fn hit_upper(&self, n: u64) -> Option<f64> {
        self.hit_upper.get((n as usize).checked_sub(1)?).copied()
    }

    pub fn hit_lower(&self, n: u64) -> Option<f64> {
        self.hit_lower.get((n as usize).checked_sub(1)?).copied()
    }

    pub fn row(&self, n: u64) -> Option<BoundaryRow> {
        let (lower, upper) = self.bounds(n)?;
        Some(BoundaryRow {
            n,
            lower,
            upper,
            eps: self.spending.value(n).ok()?,
            hit_lower: self.hit_lower[n as usize - 1],
            hit_upper: self.hit_upper[n as usize - 1],
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = BoundaryRow> + '_ {
        (1..=self.n_max()).filter_map(|n| self.row(n))
    }

    pub fn delta(&self, n: u64) -> Result<f64> {
        self.spending.delta(n)
    }

    /// Partial sum of the first alive cell and the alive mass after
    /// `n_max` steps.
    pub fn alive(&self) -> (i64, &[f64]) {
        (self.alive_start, &self.alive_mass)
    }

    /// `|sum(alive) + hit_upper + hit_lower - 1|` at `n_max`.
    pub fn mass_defect(&self) -> f64 {
        let alive: f64 = self.alive_mass.iter().sum();
        let n = self.n_max();
        (alive + self.hit_upper(n).unwrap_or(0.0) + self.hit_lower(n).unwrap_or(0.0) - 1.0).abs()
    }

    /// Extends the boundaries up to step `n_target`; a no-op if already
    /// computed.
    pub fn extend_to(&mut self, n_target: u64) -> Result<()> {
        if let Some(len) = self.spending.len() {
            if n_target > len {
                return Err(Error::SpendingOutOfRange { n: n_target, len });
            }
        }
        let extra = n_target.saturating_sub(self.n_max()) as usize;
        self.upper.reserve(extra);
        self.lower.reserve(extra);
        self.hit_upper.reserve(extra);
        self.hit_lower.reserve(extra);
        while self.n_max() < n_target {
            self.extend_one()?;
        }
        Ok(())
    }

    fn extend_one(&mut self) -> Result<()> {
        let n = self.n_max() + 1;
        let eps_n = self.spending.value(n)?;
        let alpha = self.alpha;
        let stay = 1.0 - alpha;

        // P_alpha(tau >= n, S_n = j) for j in [start, start + len].
        let mass = &mut self.alive_mass;
        let start = self.alive_start;
        mass.push(0.0);
        for i in (1..mass.len()).rev() {
            mass[i] = mass[i] * stay + mass[i - 1] * alpha;
        }
        mass[0] *= stay;
        let top = start + mass.len() as i64 - 1;

        let prev_upper = *self.hit_upper.last().expect("seeded");
        let prev_lower = *self.hit_lower.last().expect("seeded");
        let budget_upper = eps_n - prev_upper;
        let budget_lower = eps_n - prev_lower;

        // Upper: tails accumulate from the top of the support downwards.
        // Above the support the tail is zero, so `top + 1` always qualifies.
        let mut upper = top + 1;
        let mut tail_upper = 0.0;
        while upper > start.max(1) {
            let next = tail_upper + mass[(upper - 1 - start) as usize];
            if next > budget_upper {
                break;
            }
            tail_upper = next;
            upper -= 1;
        }
        if upper == start.max(1) && start > 1 {
            // Every j in [1, start] sees the full alive mass as its tail.
            upper = 1;
        }

        // Lower: tails accumulate from the bottom upwards.
        let mut lower = start - 1;
        let mut tail_lower = 0.0;
        while lower < top {
            let next = tail_lower + mass[(lower + 1 - start) as usize];
            if next > budget_lower {
                break;
            }
            tail_lower = next;
            lower += 1;
        }

        if upper <= lower {
            return Err(Error::DegenerateBoundary { n, upper, lower });
        }

        // Keep j in [lower + 1, upper - 1].
        let keep_end = ((upper - 1 - start) as usize + 1).min(mass.len());
        mass.truncate(keep_end);
        let cut = (lower + 1 - start) as usize;
        mass.drain(..cut);
        self.alive_start = lower + 1;

        self.upper.push(upper);
        self.lower.push(lower);
        self.hit_upper.push(prev_upper + tail_upper);
        self.hit_lower.push(prev_lower + tail_lower);
        Ok(())
    }
}

/// A boundary table shared between runs, extended lazily on demand.
///
/// Extension takes the write lock; reads of already computed steps only
/// need the read lock. Runners copy boundaries out in blocks, so no lock is
/// held while samples are drawn.
#[derive(Debug, Clone)]
pub struct TableHandle(Arc<RwLock<BoundaryTable>>);

impl TableHandle {
    pub fn new(table: BoundaryTable) -> Self {
        TableHandle(Arc::new(RwLock::new(table)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, BoundaryTable> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, BoundaryTable> {
        self.0.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn alpha(&self) -> f64 {
        self.read().alpha()
    }

    pub fn ensure(&self, n: u64) -> Result<()> {
        if self.read().n_max() >= n {
            return Ok(());
        }
        self.write().extend_to(n)
    }

    /// `(L_n, U_n)` for `n` in `from..from + len`, extending as needed.
    pub fn bounds_block(&self, from: u64, len: u64) -> Result<Vec<(i64, i64)>> {
        let to = from + len;
        self.ensure(to.saturating_sub(1))?;
        let table = self.read();
        Ok((from..to).map(|n| table.bounds(n).expect("ensured")).collect())
    }

    /// Clones the current table contents.
    pub fn snapshot(&self) -> BoundaryTable {
        self.read().clone()
    }

    pub fn same_table(&self, other: &TableHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

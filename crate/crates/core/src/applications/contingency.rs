//! Two-way contingency tables, the likelihood-ratio statistic for
//! independence and its parametric null model.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma_ur;

use crate::error::{invalid, Error, Result};

const BUNDLED: &str = include_str!("../../data/contingency_5x7.csv");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    /// Row-major.
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("contingency table needs at least one row and column"));
        }
        if counts.len() != rows * cols {
            return Err(invalid(format!(
                "expected {} cells for a {rows}x{cols} table, got {}",
                rows * cols,
                counts.len()
            )));
        }
        let mut row_sums = vec![0; rows];
        let mut col_sums = vec![0; cols];
        for (idx, &a) in counts.iter().enumerate() {
            row_sums[idx / cols] += a;
            col_sums[idx % cols] += a;
        }
        let total = row_sums.iter().sum();
        Ok(ContingencyTable { rows, cols, counts, row_sums, col_sums, total })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("rows have different lengths"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Comma- or whitespace-separated counts, one table row per line.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<u64>().map_err(|e| Error::Format(format!("line {}: {f:?}: {e}", lineno + 1))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// The 5x7 table of the worked example (N = 39).
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled table parses")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Degrees of freedom of the asymptotic chi-square law, `(r-1)(c-1)`.
    pub fn df(&self) -> u64 {
        ((self.rows - 1) * (self.cols - 1)) as u64
    }

    /// Table with row `i` taken from row `row_perm[i]` and likewise for
    /// columns.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Result<Self> {
        let valid = |p: &[usize], n: usize| {
            let mut seen = vec![false; n];
            p.len() == n && p.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true))
        };
        if !valid(row_perm, self.rows) || !valid(col_perm, self.cols) {
            return Err(invalid("not a permutation of the table's rows/columns"));
        }
        let counts =
            row_perm.iter().flat_map(|&i| col_perm.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        Self::new(self.rows, self.cols, counts)
    }
}

fn xlogx(x: u64) -> f64 {
    if x == 0 {
        0.0
    } else {
        let x = x as f64;
        x * x.ln()
    }
}

/// `T = 2 sum a_ij log(a_ij / h_ij)` with `h_ij = r_i c_j / N`, evaluated
/// as `2 (sum a log a - sum r log r - sum c log c + N log N)`. Empty cells,
/// including whole empty rows or columns, contribute 0.
pub fn lrt_statistic(table: &ContingencyTable) -> Result<f64> {
    if table.total == 0 {
        return Err(invalid("likelihood-ratio statistic of an all-zero table"));
    }
    let cells: f64 = table.counts.iter().map(|&a| xlogx(a)).sum();
    let rows: f64 = table.row_sums.iter().map(|&r| xlogx(r)).sum();
    let cols: f64 = table.col_sums.iter().map(|&c| xlogx(c)).sum();
    Ok((2.0 * (cells - rows - cols + xlogx(table.total))).max(0.0))
}

/// Upper tail `P(chi2_df >= t)`.
pub fn chisq_pvalue(t: f64, df: u64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, t / 2.0)
}

/// The `1 - level` quantile of `chi2_df`: the critical value of the
/// asymptotic test at nominal level `level`.
pub fn chisq_critical(level: f64, df: u64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| invalid(e.to_string()))?;
    Ok(dist.inverse_cdf(1.0 - level))
}

/// Multinomial model for `N` observations with independent margins,
/// `q_ij = (r_i / N)(c_j / N)`. Margins of sampled tables are not fixed.
#[derive(Debug, Clone)]
pub struct NullModel {
    rows: usize,
    cols: usize,
    total: u64,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl NullModel {
    pub fn fit(table: &ContingencyTable) -> Result<Self> {
        if table.total == 0 {
            return Err(invalid("cannot fit a null model to an all-zero table"));
        }
        let n = table.total as f64;
        let probs: Vec<f64> = table
            .row_sums
            .iter()
            .flat_map(|&r| table.col_sums.iter().map(move |&c| (r as f64 / n) * (c as f64 / n)))
            .collect();
        Self::from_probs(table.rows, table.cols, probs, table.total)
    }

    pub fn from_probs(rows: usize, cols: usize, probs: Vec<f64>, total: u64) -> Result<Self> {
        if probs.len() != rows * cols {
            return Err(invalid("cell probabilities do not match the table shape"));
        }
        let sampler = WeightedIndex::new(&probs).map_err(|e| invalid(format!("cell probabilities: {e}")))?;
        Ok(NullModel { rows, cols, total, probs, sampler })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ContingencyTable {
        let mut counts = vec![0u64; self.rows * self.cols];
        for _ in 0..self.total {
            counts[self.sampler.sample(rng)] += 1;
        }
        ContingencyTable::new(self.rows, self.cols, counts).expect("shape checked at construction")
    }
}

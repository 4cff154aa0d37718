//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export returns a JSON string; the page draws it on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mcpval::inference::{curve, HorizonPolicy};
use mcpval::{
    interim_interval, BernoulliSource, BitSource, BoundaryTable, RunStatus, Side, SpendingSequence, TableHandle,
};

/// Longest path the page will request; keeps the tab responsive.
const MAX_PATH: u64 = 200_000;

fn table(alpha: f64, eps: f64, k: u32) -> Result<TableHandle, String> {
    let spending = SpendingSequence::new_default(eps, k as u64).map_err(|e| e.to_string())?;
    Ok(TableHandle::new(BoundaryTable::new(alpha, spending).map_err(|e| e.to_string())?))
}

#[derive(Serialize)]
struct Staircase {
    n: Vec<u64>,
    lower: Vec<i64>,
    upper: Vec<i64>,
}

pub fn staircase_json(alpha: f64, eps: f64, k: u32, n: u32) -> Result<String, String> {
    let h = table(alpha, eps, k)?;
    h.ensure(n as u64).map_err(|e| e.to_string())?;
    let t = h.read();
    let n = n as usize;
    let s = Staircase {
        n: (1..=n as u64).collect(),
        lower: t.lower_slice()[..n].to_vec(),
        upper: t.upper_slice()[..n].to_vec(),
    };
    serde_json::to_string(&s).map_err(|e| e.to_string())
}

pub fn risk_curve_json(alpha: f64, eps: f64, k: u32, points: u32, horizon: u32) -> Result<String, String> {
    let h = table(alpha, eps, k)?;
    let points = points.max(2);
    let grid: Vec<f64> = (0..points).map(|i| (i as f64 + 0.5) / points as f64).collect();
    let policy = HorizonPolicy { initial: horizon as u64, max: horizon as u64, residual_target: 0.0 };
    let rows = curve(&h, &grid, &policy, 1).map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Path {
    /// Partial sums S_1, S_2, ...
    sums: Vec<u64>,
    lower: Vec<i64>,
    upper: Vec<i64>,
    stopped: bool,
    side: Option<&'static str>,
    p_hat: f64,
    interim: Option<(f64, f64)>,
}

pub fn simulate_path_json(alpha: f64, eps: f64, k: u32, p: f64, seed: u32, max_steps: u32) -> Result<String, String> {
    let h = table(alpha, eps, k)?;
    let max_steps = (max_steps as u64).clamp(1, MAX_PATH);
    let mut runner = mcpval::runner::Runner::new(h.clone());
    let mut source = BernoulliSource::new(p, seed as u64);
    let mut sums = Vec::new();
    let mut status = None;
    while (sums.len() as u64) < max_steps {
        let bit = source.next_bit().map_err(|e| e.0)?.unwrap_or(false);
        match runner.step(bit).map_err(|e| e.to_string())? {
            mcpval::runner::Step::Continue(state) => sums.push(state.s),
            mcpval::runner::Step::Stopped(result) => {
                if let RunStatus::Stopped { s_tau, .. } = result.status {
                    sums.push(s_tau);
                }
                status = Some(result);
                break;
            }
        }
    }
    let n = sums.len();
    let t = h.read();
    let (lower, upper) = (t.lower_slice()[..n].to_vec(), t.upper_slice()[..n].to_vec());
    drop(t);
    let path = match status {
        Some(r) => Path {
            sums,
            lower,
            upper,
            stopped: true,
            side: r.side().map(|s| match s {
                Side::Upper => "upper",
                Side::Lower => "lower",
            }),
            p_hat: r.p_hat,
            interim: None,
        },
        None => {
            let s = *sums.last().unwrap_or(&0);
            let iv = interim_interval(&mut h.write(), n as u64, None).map_err(|e| e.to_string())?;
            Path {
                sums,
                lower,
                upper,
                stopped: false,
                side: None,
                p_hat: s as f64 / n as f64,
                interim: Some((iv.lower_value(), iv.upper_value())),
            }
        }
    };
    serde_json::to_string(&path).map_err(|e| e.to_string())
}

/// Boundaries `L_n, U_n` for `n = 1..=n` as `{n, lower, upper}`.
#[wasm_bindgen]
pub fn staircase(alpha: f64, eps: f64, k: u32, n: u32) -> Result<String, JsError> {
    staircase_json(alpha, eps, k, n).map_err(|e| JsError::new(&e))
}

/// Resampling risk and expected stopping time on an evenly spaced grid.
#[wasm_bindgen]
pub fn risk_curve(alpha: f64, eps: f64, k: u32, points: u32, horizon: u32) -> Result<String, JsError> {
    risk_curve_json(alpha, eps, k, points, horizon).map_err(|e| JsError::new(&e))
}

/// One simulated run with its partial sums and the boundaries it saw.
#[wasm_bindgen]
pub fn simulate_path(alpha: f64, eps: f64, k: u32, p: f64, seed: u32, max_steps: u32) -> Result<String, JsError> {
    simulate_path_json(alpha, eps, k, p, seed, max_steps).map_err(|e| JsError::new(&e))
}

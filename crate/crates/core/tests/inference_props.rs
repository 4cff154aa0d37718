use mcpval::inference::*;
use mcpval::{
    run, BernoulliSource, BoundaryTable, RunOptions, RunResult, RunStatus, Side, SpendingSequence, TableHandle,
};
use proptest::prelude::*;

fn table(n: u64) -> BoundaryTable {
    BoundaryTable::build(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap(), n).unwrap()
}

/// Binomial pmf summed in log space with compensated summation.
fn binomial_tail_oracle(p: f64, n: u64, cut: u64, upper: bool) -> f64 {
    let mut log_pmf = n as f64 * (1.0 - p).ln();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for k in 0..=n {
        if k > 0 {
            log_pmf += ((n - k + 1) as f64 / k as f64).ln() + (p / (1.0 - p)).ln();
        }
        if (k > cut) == upper {
            let y = log_pmf.exp() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
    }
    sum
}

#[test]
fn naive_risk_oracle() {
    for &(p, n, alpha) in &[(0.11, 999, 0.1), (0.04, 1000, 0.05), (0.3, 57, 0.25), (0.09, 2000, 0.1)] {
        let cut = (n as f64 * alpha).floor() as u64;
        let want = binomial_tail_oracle(p, n, cut, p <= alpha);
        let got = naive_risk(p, n, alpha).unwrap();
        assert!((got - want).abs() < 1e-10, "p={p} n={n}: {got} vs {want}");
    }
    assert!((naive_risk(0.11, 999, 0.1).unwrap() - 0.146).abs() < 5e-4);
}

#[test]
fn stopping_mass_is_monotone_in_p() {
    let t = table(2000);
    let mut prev: Option<(f64, f64)> = None;
    for i in 1..=10 {
        let p = i as f64 / 100.0;
        let d = outcome_distribution(&t, p, 2000).unwrap();
        let (up, low) = (d.stopped_mass(Side::Upper), d.stopped_mass(Side::Lower));
        if let Some((pu, pl)) = prev {
            assert!(up >= pu - 1e-15 && low <= pl + 1e-15, "p={p}");
        }
        prev = Some((up, low));
    }
}

#[test]
fn wrong_side_mass_within_budget() {
    let h = TableHandle::new(table(10));
    let policy = HorizonPolicy { initial: 20_000, max: 1 << 18, residual_target: 1e-8 };
    for i in 0..20 {
        let p = 0.0025 + i as f64 * 0.005;
        let r = resampling_risk_auto(&h, p, &policy).unwrap();
        assert!(r.lower <= 1e-3 + 1e-12, "p={p}: {r:?}");
        assert!(r.upper <= r.lower + r.residual + 1e-15);
    }
}

#[test]
fn risk_at_alpha_is_the_table_budget() {
    let t = table(5000);
    let r = resampling_risk(&t, 0.05, 5000).unwrap();
    assert!((r.lower - t.hit_upper(5000).unwrap()).abs() < 1e-12);
    assert!(r.lower <= 1e-3 * 5000.0 / 6000.0 + 1e-12);
}

#[test]
fn curve_is_deterministic_across_thread_counts() {
    let policy = HorizonPolicy { initial: 5_000, max: 20_000, residual_target: 1e-8 };
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 50.0).collect();
    let a = curve(&TableHandle::new(table(10)), &grid, &policy, 1).unwrap();
    let b = curve(&TableHandle::new(table(10)), &grid, &policy, 3).unwrap();
    assert_eq!(a, b);
    let at_alpha = a.iter().find(|r| r.p == 0.1).unwrap();
    assert!(at_alpha.wald_bound.is_some());
    assert!(a.iter().find(|r| (r.p - 0.06).abs() < 1e-12).is_some());
}

fn stopped(tau: u64, s_tau: u64, side: Side) -> RunResult {
    RunResult { status: RunStatus::Stopped { tau, s_tau, side }, p_hat: s_tau as f64 / tau as f64 }
}

#[test]
fn ci_endpoints_increase_with_observation() {
    let h = TableHandle::new(table(10));
    let opts = CiOptions::new(0.1);
    // Reachable lower stops: S = L_n at steps where L jumps.
    let mut obs = Vec::new();
    {
        h.ensure(20_000).unwrap();
        let t = h.read();
        for n in (200..20_000).step_by(997) {
            let (l, u) = t.bounds(n).unwrap();
            if l >= 0 {
                obs.push(stopped(n, l as u64, Side::Lower));
            }
            obs.push(stopped(n, u as u64, Side::Upper));
        }
    }
    obs.sort_by_key(|o| o.estimate());
    let cis: Vec<_> = obs.iter().map(|o| confidence_interval(&h, o, &opts).unwrap()).collect();
    for w in cis.windows(2) {
        assert!(w[0].p_low <= w[1].p_low + 1e-6 && w[0].p_high <= w[1].p_high + 1e-6, "{w:?}");
    }
    for (o, ci) in obs.iter().zip(&cis) {
        assert!(ci.certified);
        assert!(ci.p_low <= o.p_hat && o.p_hat <= ci.p_high, "{o:?} {ci:?}");
    }
}

#[test]
fn ci_routes_agree() {
    let h = TableHandle::new(table(10));
    let obs = stopped(8574, 343, Side::Lower);
    let mut direct = CiOptions::new(0.05);
    direct.route = CiRoute::Direct;
    let mut complement = direct;
    complement.route = CiRoute::Complement;
    let a = confidence_interval(&h, &obs, &direct).unwrap();
    let b = confidence_interval(&h, &obs, &complement).unwrap();
    assert!((a.p_low - b.p_low).abs() < 1e-4 && (a.p_high - b.p_high).abs() < 1e-4);
}

#[test]
fn ci_narrows_as_beta_grows() {
    let h = TableHandle::new(table(10));
    let obs = stopped(8574, 343, Side::Lower);
    let wide = confidence_interval(&h, &obs, &CiOptions::new(0.01)).unwrap();
    let narrow = confidence_interval(&h, &obs, &CiOptions::new(0.2)).unwrap();
    assert!(wide.p_low <= narrow.p_low && narrow.p_high <= wide.p_high);
}

#[test]
fn running_ci_contains_final_ci() {
    let h = TableHandle::new(table(10));
    let opts = CiOptions::new(0.1);
    for seed in 0..4 {
        let cut = 300;
        let partial = run(
            &h,
            BernoulliSource::new(0.04, seed),
            &RunOptions { max_steps: Some(cut), ..Default::default() },
            &mut |_| {},
        )
        .unwrap();
        let RunStatus::Truncated { n, s } = partial.status else { continue };
        let running = confidence_interval_running(&h, n, s, &opts).unwrap();
        let done = run(&h, BernoulliSource::new(0.04, seed), &RunOptions::default(), &mut |_| {}).unwrap();
        let ci = confidence_interval(&h, &done, &opts).unwrap();
        assert!(running.p_low <= ci.p_low + 1e-6 && ci.p_high <= running.p_high + 1e-6, "{running:?} {ci:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distribution_conserves_mass(p in 0.0f64..=1.0, horizon in 1u64..3000) {
        let t = table(3000);
        let d = outcome_distribution(&t, p, horizon).unwrap();
        prop_assert!((d.total() - 1.0).abs() < 1e-9);
        let e = expected_stop_time(&t, p, horizon).unwrap();
        prop_assert!(e.value >= 1.0 && e.value <= horizon as f64 + 1e-9);
    }

    #[test]
    fn wald_bound_is_positive(p in 0.0f64..=1.0) {
        prop_assume!((p - 0.05).abs() > 1e-9);
        let w = wald_lower_bound(p, 1e-3, 0.05).unwrap();
        prop_assert!(w > 0.0 && w.is_finite());
    }
}

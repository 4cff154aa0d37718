use mcpval::persist;
use mcpval::runner::coarse_interval;
use mcpval::source::{Prefetch, SliceSource};
use mcpval::{
    h_alpha, interim_interval, run, BernoulliSource, BoundaryTable, ReportEvery, RunOptions, RunStatus, Side,
    SpendingSequence, TableCache, TableHandle,
};

fn handle() -> TableHandle {
    TableHandle::new(BoundaryTable::new(0.05, SpendingSequence::new_default(1e-3, 1000).unwrap()).unwrap())
}

#[test]
fn simulated_runs_land_on_the_correct_side() {
    let h = handle();
    for (p, side) in [(0.08, Side::Upper), (0.01, Side::Lower)] {
        let mut wrong = 0;
        for seed in 0..300 {
            let r = run(&h, BernoulliSource::new(p, seed), &RunOptions::default(), &mut |_| {}).unwrap();
            assert!(r.is_stopped());
            if r.side() != Some(side) {
                wrong += 1;
            }
            match r.side().unwrap() {
                Side::Upper => assert!(r.p_hat > 0.05),
                Side::Lower => assert!(r.p_hat <= 0.05),
            }
        }
        assert!(wrong <= 1, "p={p}: {wrong} wrong-side stops");
    }
}

#[test]
fn reporting_does_not_change_results() {
    let h = handle();
    let plain = run(&h, BernoulliSource::new(0.06, 5), &RunOptions::default(), &mut |_| {}).unwrap();
    let mut seen = Vec::new();
    let opts = RunOptions { report: ReportEvery { steps: Some(100), wall: None }, ..Default::default() };
    let reported = run(&h, BernoulliSource::new(0.06, 5), &opts, &mut |p| seen.push(*p)).unwrap();
    assert_eq!(plain, reported);
    assert_eq!(seen.len() as u64, (plain.steps() - 1) / 100);
    for p in &seen {
        assert!(p.p_min <= p.s as f64 / p.n as f64 || p.p_min <= 0.05);
        assert!(p.p_min <= plain.p_hat && plain.p_hat <= p.p_max, "{p:?}");
    }
    let prefetched =
        run(&h, Prefetch::spawn(BernoulliSource::new(0.06, 5), 256, 4), &RunOptions::default(), &mut |_| {}).unwrap();
    assert_eq!(plain, prefetched);
}

#[test]
fn interim_intervals_are_nested_and_shrink() {
    let h = handle();
    let mut t = h.write();
    let mut prev = None;
    for n in [10u64, 100, 1000, 10_000, 100_000] {
        let iv = interim_interval(&mut t, n, None).unwrap();
        let (clo, chi) = coarse_interval(&t, n).unwrap();
        assert!(clo <= iv.lower_value() && iv.upper_value() <= chi + 1e-12);
        if let Some((lo, hi)) = prev {
            assert!(lo <= iv.lower_value() && iv.upper_value() <= hi);
            assert!(iv.upper_value() - iv.lower_value() < hi - lo);
        }
        prev = Some((iv.lower_value(), iv.upper_value()));
    }
    let iv = interim_interval(&mut t, 1000, None).unwrap();
    assert!((iv.upper_value() - 0.080).abs() < 5e-4);
}

#[test]
fn interim_contains_eventual_estimates() {
    let h = handle();
    let opts = RunOptions { max_steps: Some(400), ..Default::default() };
    for seed in 0..200 {
        let partial = run(&h, BernoulliSource::new(0.05, seed), &opts, &mut |_| {}).unwrap();
        let RunStatus::Truncated { n, .. } = partial.status else { continue };
        let iv = interim_interval(&mut h.write(), n, None).unwrap();
        let done = run(
            &h,
            BernoulliSource::new(0.05, seed),
            &RunOptions { max_steps: Some(200_000), ..Default::default() },
            &mut |_| {},
        )
        .unwrap();
        if done.is_stopped() {
            assert!(iv.contains(done.estimate()), "seed={seed}: {iv:?} {done:?}");
        }
    }
}

#[test]
fn all_zeros_stop_at_first_nonnegative_lower() {
    let h = handle();
    let zeros = vec![false; 1000];
    let r = run(&h, SliceSource::new(&zeros), &RunOptions::default(), &mut |_| {}).unwrap();
    let first = (1..).find(|&n| h.read().lower(n).unwrap() >= 0).unwrap();
    assert_eq!(r.status, RunStatus::Stopped { tau: first, s_tau: 0, side: Side::Lower });
}

#[test]
fn nested_h_alpha_uses_separate_tables() {
    let cache = TableCache::new(SpendingSequence::new_default(1e-3, 1000).unwrap());
    assert_eq!(h_alpha(&cache, 0.5, BernoulliSource::new(1.0, 0), None).unwrap(), 1.0);
    let ones = [true, false, false, true];
    assert_eq!(h_alpha(&cache, 0.05, SliceSource::new(&ones), Some(4)).unwrap(), 0.5);
    assert_eq!(cache.len(), 2);
}

#[test]
fn saved_table_drives_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let h = handle();
    h.ensure(3000).unwrap();
    persist::save(&h.read(), &path).unwrap();
    let loaded = TableHandle::new(persist::load(&path).unwrap());
    for seed in 0..20 {
        let a = run(&h, BernoulliSource::new(0.07, seed), &RunOptions::default(), &mut |_| {}).unwrap();
        let b = run(&loaded, BernoulliSource::new(0.07, seed), &RunOptions::default(), &mut |_| {}).unwrap();
        assert_eq!(a, b);
    }
}

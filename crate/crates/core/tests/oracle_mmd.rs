//! Closed-form oracles for the weighted conditional MMD on discrete
//! joint-table fixtures, plus the consistency and approximation-rate
//! properties of the estimators.

use dtem::crt::{crt_pvalue, fit_sampler, PvalueRule, SamplerKind};
use dtem::dataset::{
    generate_from_table, generate_from_table_full, ColumnKind, Dataset, JointTable,
};
use dtem::kernels::{make_rff, Bandwidth};
use dtem::propensity::{oracle_weights, IpWeights};
use dtem::rng::rng_from;
use dtem::wcmmd::{
    conditional_weights_continuous, conditional_weights_discrete, d2_exact, d2_rff, importance,
    Bandwidths, ImportanceConfig, Mode,
};
use ndarray::Array2;
use rand::Rng;

/// Population squared MMD at `x = 0` of the variance-only fixture with a
/// unit-bandwidth Gaussian outcome kernel: the untreated outcome is the
/// point mass at 0 and the treated outcome is +/-1 with equal probability.
fn variance_fixture_limit() -> f64 {
    1.0 + 0.5 * (1.0 + (-4.0f64).exp()) - 2.0 * (-1.0f64).exp()
}

#[test]
fn variance_fixture_mmd_matches_closed_form() {
    let table = JointTable::variance_only_example();
    let ds = generate_from_table(&table, &[0.5, 0.5], 8000, 41).unwrap();
    let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
    let h = Bandwidth::new(1.0).unwrap();

    let at0 = conditional_weights_discrete(&ds, 0, 0.0, &ipw).unwrap();
    let d2_at0 = d2_exact(&ds, &at0, h);
    let expected = variance_fixture_limit();
    assert!(
        (d2_at0 - expected).abs() / expected < 0.15,
        "D2(0) = {d2_at0}, population {expected}"
    );

    let at1 = conditional_weights_discrete(&ds, 0, 1.0, &ipw).unwrap();
    let d2_at1 = d2_exact(&ds, &at1, h);
    assert!(d2_at1 <= 0.03, "D2(1) = {d2_at1}, population 0");
}

#[test]
fn variance_fixture_importance_approaches_population_variance() {
    // the squared-MMD curve is {limit, 0} with equal level frequencies, so
    // the population variance of the curve is limit^2 / 4
    let table = JointTable::variance_only_example();
    let ds = generate_from_table(&table, &[0.5, 0.5], 20_000, 43).unwrap();
    let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
    let bw = Bandwidths {
        h_y: Bandwidth::new(1.0).unwrap(),
        h_x: vec![None],
    };
    let cfg = ImportanceConfig::new(Mode::Exact, bw);
    let result = importance(&ds, 0, &ipw, &cfg).unwrap();
    let expected = variance_fixture_limit().powi(2) / 4.0;
    assert!(
        (result.importance - expected).abs() / expected < 0.1,
        "importance {} vs population {expected}",
        result.importance
    );
    assert!(!result.degenerate);
}

#[test]
fn estimator_error_shrinks_with_sample_size() {
    let table = JointTable::variance_only_example();
    let expected = variance_fixture_limit();
    let h = Bandwidth::new(1.0).unwrap();
    let mut medians = Vec::new();
    for (idx, n) in [500usize, 2000, 8000].into_iter().enumerate() {
        let mut errors: Vec<f64> = (0..20)
            .map(|seed| {
                let ds =
                    generate_from_table(&table, &[0.5, 0.5], n, 100 * (idx as u64 + 1) + seed)
                        .unwrap();
                let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
                let w = conditional_weights_discrete(&ds, 0, 0.0, &ipw).unwrap();
                (d2_exact(&ds, &w, h) - expected).abs()
            })
            .collect();
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(errors[errors.len() / 2]);
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "median errors not shrinking: {medians:?}"
    );
}

/// Two discrete features: the target `x` and a confounder `c` that drives
/// both the treatment probability and the outcomes. With the true propensity
/// supplied, the weighted estimator must reach the same limit as under
/// randomized assignment.
#[test]
fn confounded_and_randomized_assignments_share_the_limit() {
    // y0 = c, y1 = c + x: at x = 1 the arms differ by a unit shift whose
    // squared MMD under a unit-bandwidth kernel is (1 - e^-4) / 2
    let expected = 0.5 - 0.5 * (-4.0f64).exp();
    let h = Bandwidth::new(1.0).unwrap();
    let n = 30_000;

    let build = |confounded: bool, seed: u64| -> Dataset {
        let mut rng = rng_from(seed);
        let mut features = Array2::<f64>::zeros((n, 2));
        let mut treatment = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        for i in 0..n {
            let x = f64::from(rng.random::<f64>() < 0.5);
            let c = f64::from(rng.random::<f64>() < 0.5);
            let e = if confounded { 0.3 + 0.4 * c } else { 0.5 };
            let a = u8::from(rng.random::<f64>() < e);
            let y0 = c;
            let y1 = c + x;
            features[[i, 0]] = x;
            features[[i, 1]] = c;
            treatment.push(a);
            outcome.push(if a == 1 { y1 } else { y0 });
        }
        Dataset::new(
            vec!["x".into(), "c".into()],
            vec![
                ColumnKind::Discrete { levels: vec![0.0, 1.0] },
                ColumnKind::Discrete { levels: vec![0.0, 1.0] },
            ],
            features,
            treatment,
            outcome,
        )
        .unwrap()
    };

    for (label, confounded) in [("randomized", false), ("confounded", true)] {
        let ds = build(confounded, if confounded { 7 } else { 8 });
        let ipw = oracle_weights(
            &ds,
            |row| if confounded { 0.3 + 0.4 * row[1] } else { 0.5 },
            0.01,
        )
        .unwrap();
        let at1 = conditional_weights_discrete(&ds, 0, 1.0, &ipw).unwrap();
        let d2 = d2_exact(&ds, &at1, h);
        assert!(
            (d2 - expected).abs() < 0.04,
            "{label}: D2(1) = {d2} vs limit {expected}"
        );
        let at0 = conditional_weights_discrete(&ds, 0, 0.0, &ipw).unwrap();
        let d2_null = d2_exact(&ds, &at0, h);
        assert!(d2_null < 0.03, "{label}: D2(0) = {d2_null} vs limit 0");
    }
}

#[test]
fn identical_joint_tables_give_null_importance() {
    // same table at both feature levels: population importance is zero and
    // the finite-sample statistic must sit inside its own null distribution
    let table = JointTable::constant_table_example();
    let full = generate_from_table_full(&table, &[0.5, 0.5], 8000, 11).unwrap();
    let ds = full.dataset;
    let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
    let bw = Bandwidths {
        h_y: Bandwidth::new(1.0).unwrap(),
        h_x: vec![None],
    };
    let cfg = ImportanceConfig::new(Mode::Exact, bw);

    let sampler = fit_sampler(&ds, 0, SamplerKind::DiscreteMultinomial, 0).unwrap();
    let statistic = {
        let ipw = ipw.clone();
        let cfg = cfg.clone();
        move |d: &Dataset| importance(d, 0, &ipw, &cfg).map(|r| r.importance)
    };
    let res = crt_pvalue(&ds, 0, &statistic, &sampler, 100, 3, PvalueRule::Plain).unwrap();

    let mut draws: Vec<f64> = res.null_draws.clone();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q95 = draws[(0.95 * draws.len() as f64) as usize];
    assert!(
        res.observed <= q95,
        "observed {} above the 95th null percentile {q95}",
        res.observed
    );
}

#[test]
fn covariance_counterexample_is_invisible_to_the_statistic() {
    // both marginals match at every level, so the per-level squared MMD
    // vanishes even though the joint tables differ
    let table = JointTable::covariance_counterexample();
    let ds = generate_from_table(&table, &[0.5, 0.5], 10_000, 17).unwrap();
    let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();
    let h = Bandwidth::new(1.0).unwrap();
    for level in [0.0, 1.0] {
        let w = conditional_weights_discrete(&ds, 0, level, &ipw).unwrap();
        let d2 = d2_exact(&ds, &w, h);
        assert!(d2 <= 0.02, "D2({level}) = {d2}, population 0");
    }
}

#[test]
fn rff_error_decays_like_inverse_square_root() {
    let mut rng = rng_from(29);
    let n = 100;
    let features = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
    let ds = Dataset::new(
        vec!["x".into()],
        vec![ColumnKind::Continuous],
        features,
        (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let h = Bandwidth::new(0.8).unwrap();
    let ipw = oracle_weights(&ds, |_| 0.5, 0.01).unwrap();

    // 50 random conditioning points give 50 weightings; reuse across r
    let points: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weightings: Vec<_> = points
        .iter()
        .map(|&x| {
            conditional_weights_continuous(&ds, 0, x, &ipw, Bandwidth::new(0.5).unwrap())
                .unwrap()
        })
        .collect();
    let exact: Vec<f64> = weightings.iter().map(|w| d2_exact(&ds, w, h)).collect();

    let mut medians = Vec::new();
    for (step, r) in [250usize, 1000, 4000, 16000].into_iter().enumerate() {
        let map = make_rff(h, r, 500 + step as u64).unwrap();
        let mut errors: Vec<f64> = weightings
            .iter()
            .zip(&exact)
            .map(|(w, &e)| (d2_rff(&ds, w, &map) - e).abs())
            .collect();
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(errors[errors.len() / 2]);
    }
    for pair in medians.windows(2) {
        assert!(
            pair[1] < pair[0],
            "median rff error did not shrink: {medians:?}"
        );
    }
    // r grows 64-fold, so a sqrt rate predicts an 8-fold drop; allow slack 2
    assert!(
        medians[3] <= medians[0] / 4.0,
        "endpoint decay too slow for a sqrt rate: {medians:?}"
    );
}

#[test]
fn weighted_rff_curve_matches_weighted_exact_curve() {
    // one end-to-end cross-check of the two routes on joint-table data with
    // nonuniform weights
    let table = JointTable::variance_only_example();
    let ds = generate_from_table(&table, &[0.3, 0.7], 4000, 53).unwrap();
    let ipw = oracle_weights(&ds, |row| 0.4 + 0.1 * row[0], 0.01).unwrap();
    let h = Bandwidth::new(1.0).unwrap();
    let map = make_rff(h, 20_000, 9).unwrap();
    for level in [0.0, 1.0] {
        let w = conditional_weights_discrete(&ds, 0, level, &ipw).unwrap();
        let exact = d2_exact(&ds, &w, h);
        let approx = d2_rff(&ds, &w, &map);
        assert!(
            (exact - approx).abs() < 0.05,
            "level {level}: exact {exact} vs rff {approx}"
        );
    }
}

#[test]
fn importance_modes_agree_with_fitted_weights() {
    let table = JointTable::variance_only_example();
    let ds = generate_from_table(&table, &[0.5, 0.5], 3000, 59).unwrap();
    let ipw = IpWeights {
        w0: ds
            .treatment()
            .iter()
            .map(|&a| if a == 0 { 2.0 } else { 0.0 })
            .collect(),
        w1: ds
            .treatment()
            .iter()
            .map(|&a| if a == 1 { 2.0 } else { 0.0 })
            .collect(),
    };
    let bw = Bandwidths {
        h_y: Bandwidth::new(1.0).unwrap(),
        h_x: vec![None],
    };
    let exact = importance(&ds, 0, &ipw, &ImportanceConfig::new(Mode::Exact, bw.clone()))
        .unwrap()
        .importance;
    let map = make_rff(bw.h_y, 8000, 13).unwrap();
    let approx = importance(&ds, 0, &ipw, &ImportanceConfig::new(Mode::Rff(map), bw))
        .unwrap()
        .importance;
    assert!(
        (exact - approx).abs() / exact.max(1e-6) < 0.1,
        "exact {exact} vs rff {approx}"
    );
}

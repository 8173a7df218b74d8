use std::collections::HashSet;

use drc_core::eval::make_splits;
use drc_core::{evaluate, EvalConfig, Forest, ForestConfig, MultiForest, Param, SplitBy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_rows(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..p).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// `n_groups` loops, each carrying every threshold 0..=49 once.
fn threshold_grid(n_groups: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for g in 0..n_groups {
        for k in 0..50 {
            labels.push(vec![k as f64]);
            groups.push(g);
        }
    }
    (labels, groups)
}

fn quick_forest() -> ForestConfig {
    ForestConfig {
        n_trees: 30,
        ..Default::default()
    }
}

#[test]
fn constant_target_is_reproduced() {
    let x = noise_rows(40, 3, 1);
    let f = Forest::fit(&x, &[7.25; 40], &ForestConfig::default(), 0).unwrap();
    assert!(x.iter().all(|r| f.predict(r) == 7.25));
}

#[test]
fn single_deep_tree_memorizes_distinct_rows() {
    let x = noise_rows(120, 4, 2);
    let y: Vec<f64> = noise_rows(120, 1, 3)
        .into_iter()
        .map(|r| r[0] * 100.0)
        .collect();
    let cfg = ForestConfig {
        n_trees: 1,
        max_depth: None,
        min_samples_leaf: 1,
        features_per_split: Some(4),
        bootstrap: false,
    };
    let f = Forest::fit(&x, &y, &cfg, 4).unwrap();
    for (r, &t) in x.iter().zip(&y) {
        assert_eq!(f.predict(r), t);
    }
}

fn identity_mae(p: usize, cfg: &ForestConfig) -> (f64, f64) {
    let x = noise_rows(200, p, 5);
    let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
    let f = Forest::fit(&x[..160], &y[..160], cfg, 6).unwrap();
    let mae = (160..200)
        .map(|i| (f.predict(&x[i]) - y[i]).abs())
        .sum::<f64>()
        / 40.0;
    let range =
        y.iter().cloned().fold(f64::MIN, f64::max) - y.iter().cloned().fold(f64::MAX, f64::min);
    (mae, range)
}

#[test]
fn identity_target_is_learned_from_200_samples() {
    let (mae, range) = identity_mae(1, &ForestConfig::default());
    assert!(mae < 0.05 * range, "mae {mae} vs range {range}");
    let all = ForestConfig {
        features_per_split: Some(3),
        ..Default::default()
    };
    let (mae, range) = identity_mae(3, &all);
    assert!(
        mae < 0.05 * range,
        "with distractors: mae {mae} vs range {range}"
    );
}

#[test]
fn nan_features_are_rejected() {
    let mut x = noise_rows(10, 2, 7);
    x[3][1] = f64::NAN;
    assert!(Forest::fit(&x, &[1.0; 10], &ForestConfig::default(), 0).is_err());
}

#[test]
fn perfect_features_score_below_one_percent() {
    let (labels, groups) = threshold_grid(10);
    let cfg = EvalConfig {
        n_splits: 10,
        ..Default::default()
    };
    let r = evaluate(
        &labels,
        &labels,
        &groups,
        &[Param::Thd],
        &quick_forest(),
        &cfg,
        1,
        2,
        "labels",
    )
    .unwrap();
    let s = r.score(Param::Thd).unwrap();
    assert!(s.pct_of_range < 1.0, "{}", s.pct_of_range);
    assert!((s.pct_of_range - 100.0 * s.mae / 49.0).abs() < 1e-12);
}

/// With every loop covering 0..=49 once, every training set has mean 24.5
/// and the mean predictor's test MAE is mean |k − 24.5| = 12.5 exactly.
#[test]
fn random_features_track_the_mean_predictor() {
    let analytic = (0..50).map(|k| (k as f64 - 24.5).abs()).sum::<f64>() / 50.0;
    assert_eq!(analytic, 12.5);
    let (labels, groups) = threshold_grid(10);
    let x = noise_rows(labels.len(), 5, 8);
    let r = evaluate(
        &x,
        &labels,
        &groups,
        &[Param::Thd],
        &ForestConfig::default(),
        &EvalConfig::default(),
        3,
        4,
        "noise",
    )
    .unwrap();
    let s = r.score(Param::Thd).unwrap();
    assert!((s.mean_predictor_mae - analytic).abs() < 1e-9);
    assert!(
        (s.mae - analytic).abs() < 0.15 * analytic,
        "noise MAE {} vs {analytic}",
        s.mae
    );
}

#[test]
fn fixed_seeds_give_byte_identical_reports() {
    let (labels, groups) = threshold_grid(6);
    let x = noise_rows(labels.len(), 4, 9);
    let cfg = EvalConfig {
        n_splits: 8,
        ..Default::default()
    };
    let run = || {
        evaluate(
            &x,
            &labels,
            &groups,
            &[Param::Thd],
            &quick_forest(),
            &cfg,
            11,
            12,
            "noise",
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    let other = evaluate(
        &x,
        &labels,
        &groups,
        &[Param::Thd],
        &quick_forest(),
        &cfg,
        13,
        12,
        "noise",
    )
    .unwrap();
    assert_ne!(a.to_json(), other.to_json());
}

#[test]
fn fewer_than_five_loops_is_a_protocol_error() {
    let (labels, groups) = threshold_grid(4);
    let x = noise_rows(labels.len(), 2, 1);
    let err = evaluate(
        &x,
        &labels,
        &groups,
        &[Param::Thd],
        &quick_forest(),
        &EvalConfig::default(),
        0,
        0,
        "x",
    )
    .unwrap_err();
    assert!(matches!(err, drc_core::Error::Protocol(_)), "{err:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_stay_within_training_range(seed in 0u64..1000, n in 10usize..60) {
        let x = noise_rows(n, 3, seed);
        let y: Vec<Vec<f64>> = noise_rows(n, 2, seed + 1).into_iter().map(|r| vec![r[0] * 50.0 - 10.0, r[1].powi(3)]).collect();
        let f = MultiForest::fit(&x, &y, &quick_forest(), seed).unwrap();
        for q in noise_rows(20, 3, seed + 2).iter().map(|r| r.iter().map(|v| v * 3.0 - 1.0).collect::<Vec<_>>()) {
            for (j, p) in f.predict(&q).into_iter().enumerate() {
                let lo = y.iter().map(|r| r[j]).fold(f64::MAX, f64::min);
                let hi = y.iter().map(|r| r[j]).fold(f64::MIN, f64::max);
                prop_assert!(lo - 1e-12 <= p && p <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn no_loop_straddles_train_and_test(seed in 0u64..1000, n_groups in 5usize..20, per in 1usize..8) {
        let groups: Vec<usize> = (0..n_groups * per).map(|i| (i * 7919) % n_groups).collect();
        let cfg = EvalConfig { n_splits: 5, test_fraction: 0.2, split_by: SplitBy::Loop };
        for s in make_splits(&groups, &cfg, seed).unwrap() {
            let tr: HashSet<usize> = s.train.iter().map(|&i| groups[i]).collect();
            let te: HashSet<usize> = s.test.iter().map(|&i| groups[i]).collect();
            prop_assert!(tr.is_disjoint(&te));
            prop_assert!(!te.is_empty());
            prop_assert_eq!(s.train.len() + s.test.len(), groups.len());
        }
    }
}

mod common;

use common::{randn, rng};
use proptest::prelude::*;
use tpl_core::scheduler::{
    compute_domain_distance, compute_lambda, compute_weights, lambda_max, pair_distance, per_domain_distances,
    per_domain_weights, strategy_weights, LabeledFeatures, ScheduleParams, StrategyKind,
};

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut v = randn(&[n, d], 1.0, seed).into_values();
    v.chunks_mut(d).for_each(unit);
    v
}

/// Distance by enumerating every (class, domain pair) term from scratch.
fn brute_distance(dim: usize, values: &[f64], classes: &[usize], domains: &[usize]) -> f64 {
    let centroid = |c: usize, m: usize| {
        let mut acc = vec![0.0; dim];
        for i in 0..classes.len() {
            if classes[i] == c && domains[i] == m {
                for k in 0..dim {
                    acc[k] += values[i * dim + k];
                }
            }
        }
        unit(&mut acc);
        acc
    };
    let mut cs: Vec<usize> = classes.to_vec();
    cs.sort();
    cs.dedup();
    let mut ms: Vec<usize> = domains.to_vec();
    ms.sort();
    ms.dedup();
    let mut per_class = Vec::new();
    for &c in &cs {
        let mut terms = Vec::new();
        for a in 0..ms.len() {
            for b in a + 1..ms.len() {
                let (x, y) = (centroid(c, ms[a]), centroid(c, ms[b]));
                let cos: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                terms.push((1.0 - cos) / 2.0);
            }
        }
        per_class.push(terms.iter().sum::<f64>() / terms.len() as f64);
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[test]
fn distance_matches_enumeration_two_classes_three_domains() {
    let dim = 5;
    let classes: Vec<usize> = (0..24).map(|i| i % 2).collect();
    let domains: Vec<usize> = (0..24).map(|i| (i / 2) % 3 + 1).collect();
    let values = unit_rows(24, dim, 17);
    let f = LabeledFeatures::new(dim, &values, &classes, &domains).unwrap();
    let got = compute_domain_distance(&f).unwrap();
    let want = brute_distance(dim, &values, &classes, &domains);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn distance_extremes() {
    let values = [1.0, 0.0, 1.0, 0.0, -1.0, 0.0];
    let f = LabeledFeatures::new(2, &values, &[0, 0, 0], &[1, 1, 2]).unwrap();
    assert_eq!(compute_domain_distance(&f).unwrap(), 1.0);
    let same = [0.6, 0.8, 0.6, 0.8];
    let f = LabeledFeatures::new(2, &same, &[0, 0], &[1, 2]).unwrap();
    assert!(compute_domain_distance(&f).unwrap() < 1e-15);
    let f = LabeledFeatures::new(2, &same, &[0, 1], &[1, 2]).unwrap();
    assert!(compute_domain_distance(&f).is_err());
}

#[test]
fn outlier_domain_is_farthest() {
    let dim = 6;
    let (mut values, mut classes, mut domains) = (Vec::new(), Vec::new(), Vec::new());
    let base = unit_rows(2, dim, 1);
    let shift = unit_rows(1, dim, 2);
    for m in 1..=3 {
        for c in 0..2 {
            for k in 0..4 {
                let noise = randn(&[dim], 0.05, (m * 100 + c * 10 + k) as u64);
                let mut row: Vec<f64> = (0..dim)
                    .map(|j| base[c * dim + j] + noise.values()[j] + if m == 3 { 1.5 * shift[j] } else { 0.0 })
                    .collect();
                unit(&mut row);
                values.extend(row);
                classes.push(c);
                domains.push(m);
            }
        }
    }
    let f = LabeledFeatures::new(dim, &values, &classes, &domains).unwrap();
    let dm = per_domain_distances(&f).unwrap();
    assert!(dm[&3] > dm[&1] && dm[&3] > dm[&2], "{dm:?}");
    // brute force: d^m = mean over classes of the mean distance to the other domains
    let cent = |c: usize, m: usize| {
        let mut acc = vec![0.0; dim];
        for i in 0..classes.len() {
            if classes[i] == c && domains[i] == m {
                (0..dim).for_each(|j| acc[j] += values[i * dim + j]);
            }
        }
        unit(&mut acc);
        acc
    };
    for m in 1..=3 {
        let want = (0..2)
            .map(|c| {
                let others: Vec<f64> = (1..=3).filter(|&o| o != m).map(|o| pair_distance(&cent(c, m), &cent(c, o))).collect();
                others.iter().sum::<f64>() / others.len() as f64
            })
            .sum::<f64>()
            / 2.0;
        assert!((dm[&m] - want).abs() < 1e-12);
    }
    let p = ScheduleParams { total: 100, theta: 50.0, checkpoint_every: 10 };
    let w = per_domain_weights(&f, &[1, 2, 3], 10, &p).unwrap();
    assert!(w[&3].vision >= w[&1].vision);
    assert!(per_domain_weights(&f, &[4], 10, &p).is_err());
}

#[test]
fn two_domains_per_domain_equals_global() {
    let dim = 4;
    let classes = [0, 0, 1, 1, 0, 1];
    let domains = [1, 2, 1, 2, 1, 2];
    let values = unit_rows(6, dim, 8);
    let f = LabeledFeatures::new(dim, &values, &classes, &domains).unwrap();
    let d = compute_domain_distance(&f).unwrap();
    let dm = per_domain_distances(&f).unwrap();
    assert!((dm[&1] - d).abs() < 1e-15 && (dm[&2] - d).abs() < 1e-15);
}

#[test]
fn lambda_and_cumulative_arithmetic() {
    let l = compute_lambda(0.2, 2500, 5000, 1250.0).unwrap();
    assert!((l - (-(0.4f64).ln())).abs() < 1e-15);
    assert!((l - 0.916_290_731_874_155).abs() < 1e-12);
    assert_eq!(compute_lambda(0.25, 0, 5000, 1250.0).unwrap(), 0.0);
    assert_eq!(compute_lambda(0.0, 0, 5000, 1250.0).unwrap(), lambda_max());
    assert!(compute_lambda(0.2, 5000, 5000, 1250.0).is_err());
    let p = ScheduleParams { total: 5000, theta: 1250.0, checkpoint_every: 250 };
    let w = strategy_weights(StrategyKind::Cumulative, 2500, 0.5, &p);
    assert_eq!((w.vision, w.language), (0.75, 0.25));
    let w = compute_weights(3.0).unwrap();
    assert_eq!((w.vision, w.language), (0.25, 0.75));
    assert!(compute_weights(-0.1).is_err());
}

#[test]
fn fixed_strategies() {
    let p = ScheduleParams { total: 100, theta: 50.0, checkpoint_every: 10 };
    let w = |k, t| {
        let w = strategy_weights(k, t, 0.3, &p);
        (w.vision, w.language)
    };
    assert_eq!(w(StrategyKind::Joint, 37), (0.5, 0.5));
    assert_eq!(w(StrategyKind::TwoStage, 0), (1.0, 0.0));
    assert_eq!(w(StrategyKind::TwoStage, 49), (1.0, 0.0));
    assert_eq!(w(StrategyKind::TwoStage, 50), (0.0, 1.0));
    assert_eq!(w(StrategyKind::Alternating, 9), (1.0, 0.0));
    assert_eq!(w(StrategyKind::Alternating, 10), (0.0, 1.0));
    assert_eq!(w(StrategyKind::Alternating, 20), (1.0, 0.0));
    assert_eq!(w(StrategyKind::Cumulative, 100), (0.0, 1.0));
}

fn rotation(dim: usize, seed: u64) -> Vec<f64> {
    // Gram–Schmidt on a random matrix
    let mut q = randn(&[dim, dim], 1.0, seed).into_values();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| q[i * dim + k] * q[j * dim + k]).sum();
            for k in 0..dim {
                q[i * dim + k] -= dot * q[j * dim + k];
            }
        }
        unit(&mut q[i * dim..(i + 1) * dim]);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_sum_to_one_for_every_strategy(t in 0usize..6000, d in 0.0f64..1.0, theta in 1.0f64..10_000.0, every in 1usize..500) {
        let p = ScheduleParams { total: 5000, theta, checkpoint_every: every };
        for k in StrategyKind::ALL {
            let w = strategy_weights(k, t, d, &p);
            prop_assert_eq!(w.vision + w.language, 1.0);
            prop_assert!((0.0..=1.0).contains(&w.vision) && (0.0..=1.0).contains(&w.language));
        }
    }

    #[test]
    fn transitive_language_weight_grows_with_t(t1 in 0usize..5000, t2 in 0usize..5000, d in 0.0f64..1.0, theta in 1.0f64..5000.0) {
        let p = ScheduleParams { total: 5000, theta, checkpoint_every: 100 };
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = strategy_weights(StrategyKind::Transitive, lo, d, &p).language;
        let b = strategy_weights(StrategyKind::Transitive, hi, d, &p).language;
        prop_assert!(a <= b);
    }

    #[test]
    fn transitive_language_weight_shrinks_with_d(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, t in 0usize..5000, theta in 1.0f64..5000.0) {
        let p = ScheduleParams { total: 5000, theta, checkpoint_every: 100 };
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        let a = strategy_weights(StrategyKind::Transitive, t, lo, &p).language;
        let b = strategy_weights(StrategyKind::Transitive, t, hi, &p).language;
        prop_assert!(a >= b);
    }

    #[test]
    fn distance_is_rotation_invariant(seed in 0u64..1000) {
        let dim = 4;
        let n = 18;
        let values = unit_rows(n, dim, seed);
        let mut r = rng(seed);
        let classes: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let domains: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut r, 1..4)).collect();
        let q = rotation(dim, seed + 1);
        let rotated: Vec<f64> = values
            .chunks(dim)
            .flat_map(|row| (0..dim).map(|i| (0..dim).map(|k| q[i * dim + k] * row[k]).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        let a = LabeledFeatures::new(dim, &values, &classes, &domains).unwrap();
        let b = LabeledFeatures::new(dim, &rotated, &classes, &domains).unwrap();
        match (compute_domain_distance(&a), compute_domain_distance(&b)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
    }

    #[test]
    fn distance_lies_in_unit_interval_and_matches_enumeration(seed in 0u64..1000) {
        let dim = 3;
        let classes: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let domains: Vec<usize> = (0..12).map(|i| (i / 2) % 3).collect();
        let values = unit_rows(12, dim, seed);
        let f = LabeledFeatures::new(dim, &values, &classes, &domains).unwrap();
        let d = compute_domain_distance(&f).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - brute_distance(dim, &values, &classes, &domains)).abs() < 1e-12);
    }
}

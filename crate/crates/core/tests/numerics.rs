mod common;

use common::randn;
use proptest::prelude::*;
use tpl_core::numerics::{adamw_step, cosine_lr, AdamWConfig, AdamWState, Graph, Tensor};

#[test]
fn first_adamw_step_moves_by_lr() {
    let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_requires_grad(true);
    p.set_grad(vec![1.0]).unwrap();
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut st = AdamWState::new(1, cfg);
    adamw_step(&mut p, &mut st, 0.1).unwrap();
    // m̂ = v̂ = 1 → step = lr·1/(1 + eps)
    assert!((p.values()[0] - 0.9).abs() < 1e-7);
    assert!((p.values()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn decoupled_decay_ignores_moments() {
    let mut p = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap().with_requires_grad(true);
    p.set_grad(vec![0.0, 0.0]).unwrap();
    let mut st = AdamWState::new(2, AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() });
    adamw_step(&mut p, &mut st, 0.5).unwrap();
    assert_eq!(p.values(), [2.0 * 0.95, -4.0 * 0.95]);
}

#[test]
fn cosine_midpoint() {
    let lr = cosine_lr(500, 1000, 3e-5, 0.0).unwrap();
    assert!((lr - 1.5e-5).abs() < 1e-18);
    assert_eq!(cosine_lr(0, 1000, 3e-5, 1e-6).unwrap(), 3e-5);
    assert!((cosine_lr(1000, 1000, 3e-5, 1e-6).unwrap() - 1e-6).abs() < 1e-20);
    assert!(cosine_lr(1001, 1000, 3e-5, 0.0).is_err());
}

#[test]
fn same_inputs_same_bits() {
    let run = || {
        let mut g = Graph::new();
        let a = g.leaf(&randn(&[4, 6], 1.0, 3).with_requires_grad(true)).unwrap();
        let b = g.leaf(&randn(&[5, 6], 1.0, 4).with_requires_grad(true)).unwrap();
        let s = g.cosine_similarity(a, b).unwrap();
        let l = g.log_softmax(s).unwrap();
        let t = g.sum_all(l).unwrap();
        g.backward(t).unwrap();
        (g.value(t).to_vec(), g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_norms_are_one(seed in 0u64..10_000, scale in 0.01f64..50.0, rows in 1usize..6, cols in 1usize..9) {
        let mut g = Graph::new();
        let x = g.constant(&[rows, cols], randn(&[rows, cols], scale, seed).into_values()).unwrap();
        let s = g.softmax(x).unwrap();
        for r in g.value(s).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let n = g.l2_normalize(x).unwrap();
        for r in g.value(n).chunks(cols) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

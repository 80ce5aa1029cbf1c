mod common;

use common::{composed_check, op_cases, randn};
use tpl_core::numerics::Graph;

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_cases();
    assert!(cases.len() >= 30);
    for c in &cases {
        let e = c.error();
        assert!(e < TOL, "{}: max relative error {e:e}", c.name);
    }
}

#[test]
fn composed_objective_matches_finite_differences() {
    let (worst, count) = composed_check();
    assert!(count > 300, "only {count} parameters checked");
    assert!(worst < TOL, "composed loss: max relative error {worst:e} over {count} values");
}

#[test]
fn detached_inputs_receive_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(&randn(&[2, 2], 1.0, 1).with_requires_grad(true)).unwrap();
    let d = g.detach(a).unwrap();
    let y = g.mul(a, d).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    // d(a·stop(a))/da = stop(a)
    assert_eq!(g.grad(a).unwrap(), g.value(d));
}

//! Analytic gradients against central finite differences.

use ndiff::gradcheck::{self, OpCheck};
use ndiff::{Graph, Tensor};

const OP_TOL: f64 = 1e-4;

fn assert_within(checks: &[OpCheck]) {
    for c in checks {
        assert!(
            c.worst < OP_TOL,
            "{}: worst relative error {:e}",
            c.name,
            c.worst
        );
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = gradcheck::op_suite(100);
    assert!(checks.len() >= 19);
    assert_within(&checks);
}

#[test]
fn network_check_is_seed_independent() {
    assert_within(&[gradcheck::check_network(11), gradcheck::check_network(12)]);
}

/// A wrong backward rule must be caught: pretend relu is the identity.
#[test]
fn checker_flags_a_wrong_rule() {
    let bad = gradcheck::check_op(
        "relu_as_id",
        &|g, v| g.relu(v[0]),
        &|x| x[0].clone(),
        &[(3, 4)],
        true,
        5,
    );
    assert!(bad.worst > 1e-2);
}

/// y = (a*b) + (a*b)^2 built once with a shared node versus twice as a tree.
#[test]
fn shared_subexpression_matches_unrolled_tree() {
    let a = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.7]);
    let b = Tensor::matrix(2, 2, vec![1.1, 0.4, -0.5, 0.9]);

    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let ab = g.mul(av, bv).unwrap();
    let sq = g.square(ab);
    let y = g.add(ab, sq).unwrap();
    let shared_root = g.sum(y);
    let shared = g.gradients(shared_root).unwrap();

    let mut t = Graph::new();
    let (at, bt) = (t.input(a), t.input(b));
    let ab1 = t.mul(at, bt).unwrap();
    let ab2 = t.mul(at, bt).unwrap();
    let sq = t.square(ab2);
    let y = t.add(ab1, sq).unwrap();
    let tree_root = t.sum(y);
    let tree = t.gradients(tree_root).unwrap();

    for (s, t) in [(av, at), (bv, bt)] {
        for (x, y) in shared
            .get(s)
            .unwrap()
            .data()
            .iter()
            .zip(tree.get(t).unwrap().data())
        {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

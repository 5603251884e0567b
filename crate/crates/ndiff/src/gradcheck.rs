//! Central finite-difference checks of the backward rules.
//!
//! The reference side only calls value-route [`Tensor`] methods, never the
//! tape, so it is independent of the rules being checked. Used by the test
//! suite and by acceptance tooling that wants the worst error per op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamStore, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - b| / max(|a| + |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    /// Worst relative error over every input element of every trial.
    pub worst: f64,
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, avoid_zero: bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if !avoid_zero || v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs[which].len());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += STEP;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= STEP;
        out.push((f(&plus) - f(&minus)) / (2.0 * STEP));
    }
    out
}

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;
pub type Eval = dyn Fn(&[Tensor]) -> Tensor;

/// Worst relative error of `d sum(op(x) * w) / dx` over `trials` random
/// inputs of the given shapes. Random weights make every output element
/// matter.
pub fn check_op(
    name: &'static str,
    build: &Build,
    eval: &Eval,
    shapes: &[(usize, usize)],
    avoid_zero: bool,
    trials: usize,
) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| random_matrix(&mut rng, r, c, avoid_zero))
            .collect();
        let out_shape = eval(&inputs).shape().to_vec();
        let weights = Tensor::new(
            out_shape.clone(),
            (0..out_shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .expect("shape matches data");

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = g.input(weights.clone());
        let weighted = g.mul(out, w).expect("same shape");
        let root = g.sum(weighted);
        let grads = g.gradients(root).expect("scalar root");

        let scalar = |xs: &[Tensor]| eval(xs).mul(&weights).expect("same shape").sum();
        for (which, var) in vars.iter().enumerate() {
            let numeric = numeric_grad(&scalar, &inputs, which);
            match grads.get(*var) {
                Some(analytic) => {
                    for (a, n) in analytic.data().iter().zip(&numeric) {
                        worst = worst.max(rel_err(*a, *n));
                    }
                }
                None => worst = f64::INFINITY,
            }
        }
    }
    OpCheck { name, worst }
}

/// Parameter-by-parameter check of a three-layer ReLU network under `mse`.
pub fn check_network(seed: u64) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [5, 7, 6, 2];
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for l in 0..3 {
        let w = random_matrix(&mut rng, dims[l], dims[l + 1], false).scale(0.5);
        let b = random_matrix(&mut rng, 1, dims[l + 1], false).scale(0.1);
        ids.push((
            store.insert(&format!("w{l}"), w),
            store.insert(&format!("b{l}"), b),
        ));
    }
    let x = random_matrix(&mut rng, 4, 5, false);
    let y = random_matrix(&mut rng, 4, 2, false);

    let value_loss = |store: &ParamStore| -> f64 {
        let mut h = x.clone();
        for (l, (w, b)) in ids.iter().enumerate() {
            h = h
                .matmul(store.value(*w))
                .unwrap()
                .add(store.value(*b))
                .unwrap();
            if l < 2 {
                h = h.relu();
            }
        }
        h.sub(&y).unwrap().square().mean()
    };

    let mut g = Graph::new();
    let mut h = g.input(x.clone());
    for (l, (w, b)) in ids.iter().enumerate() {
        let wv = g.param(&store, *w);
        let bv = g.param(&store, *b);
        h = g.matmul(h, wv).unwrap();
        h = g.add(h, bv).unwrap();
        if l < 2 {
            h = g.relu(h);
        }
    }
    let yv = g.input(y.clone());
    let root = g.mse(h, yv).unwrap();
    let mut worst = (g.value(root).item() - value_loss(&store)).abs();
    g.backward(root, &mut store).unwrap();

    for id in store.ids().collect::<Vec<_>>() {
        let analytic = store.grad(id).clone();
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = value_loss(&store);
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = value_loss(&store);
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * STEP)));
        }
    }
    OpCheck {
        name: "network",
        worst,
    }
}

/// Every differentiable op on the tape, `trials` random inputs each, plus
/// the network check.
pub fn op_suite(trials: usize) -> Vec<OpCheck> {
    let t = trials;
    vec![
        check_op(
            "matmul",
            &|g, v| g.matmul(v[0], v[1]).unwrap(),
            &|x| x[0].matmul(&x[1]).unwrap(),
            &[(3, 4), (4, 2)],
            false,
            t,
        ),
        check_op(
            "add",
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &|x| x[0].add(&x[1]).unwrap(),
            &[(3, 2), (3, 2)],
            false,
            t,
        ),
        check_op(
            "add_bcast",
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &|x| x[0].add(&x[1]).unwrap(),
            &[(4, 3), (1, 3)],
            false,
            t,
        ),
        check_op(
            "sub",
            &|g, v| g.sub(v[0], v[1]).unwrap(),
            &|x| x[0].sub(&x[1]).unwrap(),
            &[(2, 3), (2, 3)],
            false,
            t,
        ),
        check_op(
            "sub_bcast",
            &|g, v| g.sub(v[0], v[1]).unwrap(),
            &|x| x[0].sub(&x[1]).unwrap(),
            &[(5, 2), (1, 2)],
            false,
            t,
        ),
        check_op(
            "mul",
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            &|x| x[0].mul(&x[1]).unwrap(),
            &[(3, 3), (3, 3)],
            false,
            t,
        ),
        check_op(
            "relu",
            &|g, v| g.relu(v[0]),
            &|x| x[0].relu(),
            &[(3, 4)],
            true,
            t,
        ),
        check_op(
            "sigmoid",
            &|g, v| g.sigmoid(v[0]),
            &|x| x[0].sigmoid(),
            &[(3, 4)],
            false,
            t,
        ),
        check_op(
            "exp",
            &|g, v| g.exp(v[0]),
            &|x| x[0].exp(),
            &[(2, 3)],
            false,
            t,
        ),
        check_op(
            "square",
            &|g, v| g.square(v[0]),
            &|x| x[0].square(),
            &[(2, 3)],
            false,
            t,
        ),
        check_op(
            "scale",
            &|g, v| g.scale(v[0], -1.7),
            &|x| x[0].scale(-1.7),
            &[(2, 2)],
            false,
            t,
        ),
        check_op(
            "add_scalar",
            &|g, v| g.add_scalar(v[0], 0.3),
            &|x| x[0].add_scalar(0.3),
            &[(2, 2)],
            false,
            t,
        ),
        // Bounds at +-1.005 keep the kinks away from almost every draw.
        check_op(
            "clamp",
            &|g, v| g.clamp(v[0], -1.005, 1.005),
            &|x| x[0].clamp(-1.005, 1.005),
            &[(3, 3)],
            false,
            t,
        ),
        check_op(
            "sum",
            &|g, v| g.sum(v[0]),
            &|x| Tensor::scalar(x[0].sum()),
            &[(3, 4)],
            false,
            t,
        ),
        check_op(
            "mean",
            &|g, v| g.mean(v[0]),
            &|x| Tensor::scalar(x[0].mean()),
            &[(3, 4)],
            false,
            t,
        ),
        check_op(
            "mse",
            &|g, v| g.mse(v[0], v[1]).unwrap(),
            &|x| Tensor::scalar(x[0].sub(&x[1]).unwrap().square().mean()),
            &[(3, 2), (3, 2)],
            false,
            t,
        ),
        check_op(
            "concat",
            &|g, v| g.concat(&[v[0], v[1], v[0]]).unwrap(),
            &|x| Tensor::concat_cols(&[&x[0], &x[1], &x[0]]).unwrap(),
            &[(3, 2), (3, 1)],
            false,
            t,
        ),
        check_op(
            "slice",
            &|g, v| g.slice_cols(v[0], 1, 2).unwrap(),
            &|x| x[0].slice_cols(1, 2).unwrap(),
            &[(3, 4)],
            false,
            t,
        ),
        check_network(3),
    ]
}

//! Finite-difference oracle over the autodiff engine: every
//! differentiable operation, composed pipelines, and a random MLP.

use dmad_core::autodiff::{finite_difference_check, Graph, Node, Tensor};
use dmad_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let mut rng = stream(seed, &[0x7e]);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn check<F>(params: Vec<Tensor>, tol: f64, f: F)
where
    F: FnMut(&mut Graph, &[Node]) -> dmad_core::Result<Node>,
{
    let mut params = params;
    let report = finite_difference_check(&mut params, H, f).unwrap();
    assert!(
        report.max_rel_err < tol,
        "max rel err {} at param {} index {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
}

#[test]
fn matmul_gradients() {
    check(
        vec![rand_tensor(vec![3, 4], 1, 1.0), rand_tensor(vec![4, 2], 2, 1.0)],
        1e-6,
        |g, n| {
            let c = g.matmul(n[0], n[1])?;
            g.sum(c)
        },
    );
}

#[test]
fn elementwise_gradients() {
    check(
        vec![rand_tensor(vec![2, 3], 3, 1.0), rand_tensor(vec![3], 4, 1.0)],
        1e-6,
        |g, n| {
            let a = g.add(n[0], n[1])?; // broadcast add
            let m = g.mul(a, n[0])?;
            let s = g.sub(m, n[1])?;
            let sig = g.sigmoid(s)?;
            let ge = g.gelu(sig)?;
            g.sum(ge)
        },
    );
}

#[test]
fn log_pow_affine_gradients() {
    let mut base = rand_tensor(vec![5], 5, 0.4);
    for v in base.data_mut() {
        *v = v.abs() + 0.5; // keep log/pow in-domain
    }
    check(vec![base], 1e-6, |g, n| {
        let l = g.log(n[0])?;
        let p = g.pow_scalar(n[0], 2.5)?;
        let a = g.affine(p, -0.3, 1.0)?;
        let m = g.mul(l, a)?;
        g.mean(m)
    });
}

#[test]
fn softmax_gradients_and_jacobian_rows() {
    check(vec![rand_tensor(vec![3, 4], 6, 2.0)], 1e-6, |g, n| {
        let s = g.softmax(n[0], 1)?;
        let w = g.leaf(&rand_tensor(vec![3, 4], 7, 1.0));
        let m = g.mul(s, w)?;
        g.sum(m)
    });

    // rows of the softmax Jacobian sum to zero: the gradient of
    // sum(softmax(x)) vanishes identically
    let mut g = Graph::new();
    let x = g.leaf(&rand_tensor(vec![6], 8, 3.0).with_grad());
    let s = g.softmax(x, 0).unwrap();
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    for v in g.grad(x).unwrap().data() {
        assert!(v.abs() < 1e-12, "jacobian row sum {v}");
    }
}

#[test]
fn layer_norm_gradients() {
    check(
        vec![
            rand_tensor(vec![3, 5], 9, 1.5),
            rand_tensor(vec![5], 10, 0.5),
            rand_tensor(vec![5], 11, 0.5),
        ],
        1e-5,
        |g, n| {
            let ln = g.layer_norm(n[0], n[1], n[2], 1e-6)?;
            let w = g.leaf(&rand_tensor(vec![3, 5], 12, 1.0));
            let m = g.mul(ln, w)?;
            g.sum(m)
        },
    );
}

#[test]
fn slice_concat_transpose_gradients() {
    check(vec![rand_tensor(vec![4, 6], 13, 1.0)], 1e-6, |g, n| {
        let left = g.slice_cols(n[0], 0, 3)?;
        let right = g.slice_cols(n[0], 3, 6)?;
        let top = g.slice_rows(n[0], 0, 2)?;
        let cat = g.concat_cols(&[left, right])?;
        let t = g.transpose(top)?;
        let tt = g.transpose(t)?;
        let bottom = g.slice_rows(cat, 2, 4)?;
        let back = g.concat_rows(&[tt, bottom])?;
        let sq = g.mul(back, back)?;
        g.sum(sq)
    });
}

#[test]
fn random_three_layer_mlp_matches_finite_differences() {
    // tanh-free MLP: linear → gelu → linear → gelu → linear → mean
    let dims = [6usize, 8, 5, 1];
    let mut params = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        params.push(rand_tensor(vec![w[1], w[0]], 20 + i as u64, 0.8));
        params.push(rand_tensor(vec![w[1]], 30 + i as u64, 0.3));
    }
    let input = rand_tensor(vec![2, 6], 40, 1.0);
    check(params, TOL, move |g, n| {
        let mut x = g.leaf(&input);
        for layer in 0..3 {
            let w_t = g.transpose(n[2 * layer])?;
            x = g.matmul(x, w_t)?;
            x = g.add(x, n[2 * layer + 1])?;
            if layer < 2 {
                x = g.gelu(x)?;
            }
        }
        g.mean(x)
    });
}

#[test]
fn dropout_mask_is_differentiable_through() {
    // with a frozen mask (same rng seed), dropout is a linear op
    let x = rand_tensor(vec![8], 50, 1.0);
    let mut params = vec![x];
    let report = finite_difference_check(&mut params, H, |g, n| {
        let mut rng = stream(99, &[1]);
        let d = g.dropout(n[0], 0.5, &mut rng)?;
        let sq = g.mul(d, d)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_outputs_are_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
        let mut g = Graph::new();
        let n = values.len();
        let x = g.leaf(&Tensor::new(vec![n], values).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let out = g.value(s).data();
        prop_assert!(out.iter().all(|v| *v >= 0.0));
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_exactly_doubles(seed in 0u64..500) {
        let mut g = Graph::new();
        let x = g.leaf(&rand_tensor(vec![3, 3], seed, 1.0).with_grad());
        let y = g.leaf(&rand_tensor(vec![3, 3], seed + 1000, 1.0));
        let m = g.matmul(x, y).unwrap();
        let s = g.sigmoid(m).unwrap();
        let loss = g.mean(s).unwrap();
        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap().data();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn finite_inputs_never_produce_non_finite(seed in 0u64..200) {
        let mut g = Graph::new();
        let x = g.leaf(&rand_tensor(vec![4, 4], seed, 100.0));
        let s = g.softmax(x, 1).unwrap();
        let gelu = g.gelu(x).unwrap();
        let sig = g.sigmoid(x).unwrap();
        let a = g.add(s, sig).unwrap();
        let m = g.mul(a, gelu).unwrap();
        let out = g.sum(m).unwrap();
        prop_assert!(g.value(out).item().unwrap().is_finite());
    }
}

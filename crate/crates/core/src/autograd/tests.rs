//! Finite-difference verification for every op's backward rule.
//!
//! Each test builds a small graph from random leaves, reduces the output to a
//! scalar through a fixed random projection (so every output component
//! contributes), and compares the analytic leaf gradients against central
//! differences coordinate by coordinate.

use super::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

/// Compare analytic gradients of `build`'s output (projected to a scalar)
/// against central finite differences, for every coordinate of every input.
fn check_grads(inputs: &[Array2<f64>], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut proj_rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut projection: Option<Array2<f64>> = None;

    let mut eval = |xs: &[Array2<f64>]| -> (f64, Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = xs.iter().map(|a| g.leaf(a.clone())).collect();
        let out = build(&mut g, &leaves);
        let w = projection
            .get_or_insert_with(|| {
                Array2::from_shape_fn(g.value(out).raw_dim(), |_| proj_rng.random_range(0.3..1.0))
            })
            .clone();
        let wid = g.leaf(w);
        let prod = g.mul(out, wid);
        let scalar = g.sum_all(prod);
        let v = g.scalar(scalar);
        (v, g, leaves, scalar)
    };

    let (_, graph, leaves, scalar) = eval(inputs);
    let grads = graph.backward(scalar);

    let eps = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[k])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(input.raw_dim()));
        for ((i, j), _) in input.indexed_iter() {
            let mut plus = inputs.to_vec();
            plus[k][[i, j]] += eps;
            let mut minus = inputs.to_vec();
            minus[k][[i, j]] -= eps;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let a = analytic[[i, j]];
            let tol = 1e-7 + 1e-5 * a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} coord ({i},{j}): analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn add_sub_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
    let b = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
    check_grads(&[a.clone(), b.clone()], &|g, l| g.add(l[0], l[1]));
    check_grads(&[a.clone(), b.clone()], &|g, l| g.sub(l[0], l[1]));
    check_grads(&[a.clone(), b.clone()], &|g, l| g.mul(l[0], l[1]));
    check_grads(&[a.clone()], &|g, l| g.scale(l[0], -2.5));
    check_grads(&[a], &|g, l| g.add_scalar(l[0], 3.0));
}

#[test]
fn matmul_all_transpose_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // y is always 3×5; operand storage shapes vary with the flags.
    let cases = [
        (false, false, (3, 4), (4, 5)),
        (true, false, (4, 3), (4, 5)),
        (false, true, (3, 4), (5, 4)),
        (true, true, (4, 3), (5, 4)),
    ];
    for (ta, tb, da, db) in cases {
        let a = rand_mat(&mut rng, da.0, da.1, -1.0, 1.0);
        let b = rand_mat(&mut rng, db.0, db.1, -1.0, 1.0);
        check_grads(&[a, b], &move |g, l| g.matmul_t(l[0], l[1], ta, tb));
    }
}

#[test]
fn add_row_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
    let row = rand_mat(&mut rng, 1, 3, -1.0, 1.0);
    check_grads(&[a, row], &|g, l| g.add_row(l[0], l[1]));
}

#[test]
fn slice_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_mat(&mut rng, 3, 6, -1.0, 1.0);
    check_grads(&[a], &|g, l| g.slice_cols(l[0], 1, 4));

    let p1 = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
    let p2 = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
    let p3 = rand_mat(&mut rng, 3, 1, -1.0, 1.0);
    check_grads(&[p1, p2, p3], &|g, l| g.concat_cols(l));

    let q1 = rand_mat(&mut rng, 2, 4, -1.0, 1.0);
    let q2 = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
    check_grads(&[q1, q2], &|g, l| g.concat_rows(l));
}

#[test]
fn gather_rows_accumulates_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
    check_grads(&[a], &|g, l| g.gather_rows(l[0], vec![2, 0, 2]));
}

#[test]
fn compose_rows_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let kept = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
    let filler = rand_mat(&mut rng, 1, 4, -1.0, 1.0);
    check_grads(&[kept, filler], &|g, l| {
        g.compose_rows(l[0], l[1], vec![0, 3, 4], vec![1, 2])
    });
}

#[test]
fn softmax_rows_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_mat(&mut rng, 3, 5, -2.0, 2.0);
    check_grads(&[a], &|g, l| g.softmax_rows(l[0]));
}

#[test]
fn layer_norm_full_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_mat(&mut rng, 4, 5, -2.0, 2.0);
    let gain = rand_mat(&mut rng, 1, 5, 0.5, 1.5);
    let bias = rand_mat(&mut rng, 1, 5, -0.5, 0.5);
    check_grads(&[x, gain, bias], &|g, l| g.layer_norm(l[0], l[1], l[2], 1e-6));
}

#[test]
fn gelu_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_mat(&mut rng, 3, 4, -3.0, 3.0);
    check_grads(&[a], &|g, l| g.gelu(l[0]));
}

#[test]
fn reductions_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
    check_grads(&[a.clone()], &|g, l| g.mean_rows(l[0]));
    check_grads(&[a.clone()], &|g, l| g.row_sum(l[0]));
    check_grads(&[a.clone()], &|g, l| g.mean_all(l[0]));
    check_grads(&[a], &|g, l| g.sum_all(l[0]));

    // Rows comfortably away from zero norm.
    let b = rand_mat(&mut rng, 4, 3, 0.5, 1.5);
    check_grads(&[b], &|g, l| g.row_normalize(l[0]));
}

#[test]
fn diag_and_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_mat(&mut rng, 4, 4, -2.0, 2.0);
    check_grads(&[a.clone()], &|g, l| g.take_diag(l[0]));
    check_grads(&[a.clone()], &|g, l| g.row_log_sum_exp(l[0], false));
    check_grads(&[a], &|g, l| g.row_log_sum_exp(l[0], true));
}

#[test]
fn exp_and_ln() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
    check_grads(&[a], &|g, l| g.exp(l[0]));
    let b = rand_mat(&mut rng, 3, 3, 0.5, 3.0);
    check_grads(&[b], &|g, l| g.ln(l[0]));
}

#[test]
fn diamond_reuse_accumulates() {
    // x feeds two branches; the leaf gradient must be the sum of both paths.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
    check_grads(&[x], &|g, l| {
        let sq = g.mul(l[0], l[0]);
        let gl = g.gelu(l[0]);
        g.add(sq, gl)
    });
}

#[test]
fn attention_like_composite() {
    // A miniature attention + MLP block exercises op chaining end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_mat(&mut rng, 4, 6, -1.0, 1.0);
    let wqkv = rand_mat(&mut rng, 6, 18, -0.3, 0.3);
    let gain = rand_mat(&mut rng, 1, 6, 0.8, 1.2);
    let bias = rand_mat(&mut rng, 1, 6, -0.1, 0.1);
    check_grads(&[x, wqkv, gain, bias], &|g, l| {
        let h = g.layer_norm(l[0], l[2], l[3], 1e-6);
        let qkv = g.matmul(h, l[1]);
        let q = g.slice_cols(qkv, 0, 6);
        let k = g.slice_cols(qkv, 6, 12);
        let v = g.slice_cols(qkv, 12, 18);
        let scores = g.matmul_t(q, k, false, true);
        let scaled = g.scale(scores, 1.0 / (6.0f64).sqrt());
        let attn = g.softmax_rows(scaled);
        let out = g.matmul(attn, v);
        g.add(l[0], out)
    });
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_mat(&mut rng, 5, 5, -1.0, 1.0);
    let run = |x: &Array2<f64>| {
        let mut g = Graph::new();
        let l = g.leaf(x.clone());
        let sm = g.softmax_rows(l);
        let lse = g.row_log_sum_exp(sm, true);
        let out = g.sum_all(lse);
        g.scalar(out)
    };
    let a = run(&x);
    let b = run(&x);
    assert!(a.to_bits() == b.to_bits(), "repeated forward passes must agree bitwise");
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Array2::zeros((2, 2)));
    let y = g.gelu(x);
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| g.backward(y)));
    assert!(result.is_err(), "non-scalar loss must be rejected");
}

#[test]
fn untouched_leaves_have_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Array2::from_elem((2, 2), 1.5));
    let unused = g.leaf(Array2::from_elem((2, 2), 7.0));
    let y = g.mul(x, x);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(unused).is_none());
    let gx = grads.get(x).unwrap();
    assert!(gx.iter().all(|v| (*v - 3.0).abs() < 1e-12));
}

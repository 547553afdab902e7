use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check;

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output element matters.
fn readout(g: &mut Graph<f64>, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = ArrayD::from_shape_vec(IxDyn(&shape), (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn assert_grads(inputs: &[ArrayD<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    for (i, r) in check(inputs, 1e-5, |g, v| {
        let y = f(g, v);
        readout(g, y)
    })
    .iter()
    .enumerate()
    {
        assert!(r.rel_error < 1e-6, "input {i}: {r:?}");
    }
}

#[test]
fn broadcast_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_array(&[2, 3, 4], &mut rng);
    let b = rand_array(&[3, 1], &mut rng).mapv(|v| v + 2.0);
    assert_grads(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_grads(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    assert_grads(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_grads(&[a, b], |g, v| g.div(v[0], v[1]));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_array(&[3, 5], &mut rng);
    let pos = x.mapv(|v| v.abs() + 0.5);
    assert_grads(&[x.clone()], |g, v| g.sigmoid(v[0]));
    assert_grads(&[x.clone()], |g, v| g.tanh(v[0]));
    assert_grads(&[x.clone()], |g, v| g.gelu(v[0]));
    assert_grads(&[x.clone()], |g, v| g.exp(v[0]));
    assert_grads(&[pos.clone()], |g, v| g.ln(v[0]));
    assert_grads(&[pos.clone()], |g, v| g.powf(v[0], -0.5));
    assert_grads(&[x.clone()], |g, v| g.scale(v[0], 3.0));
    assert_grads(&[x.clone()], |g, v| g.add_scalar(v[0], 3.0));
    // Keep away from the kinks.
    let away = x.mapv(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    assert_grads(&[away.clone()], |g, v| g.relu(v[0]));
    assert_grads(&[away.clone()], |g, v| g.abs(v[0]));
    let inside = x.mapv(|v| if (v - 0.5).abs() < 0.05 || (v + 0.5).abs() < 0.05 { v + 0.1 } else { v });
    assert_grads(&[inside], |g, v| g.clamp(v[0], -0.5, 0.5));
}

#[test]
fn matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&[3, 4], &mut rng);
    let b = rand_array(&[4, 5], &mut rng);
    let bt = rand_array(&[5, 4], &mut rng);
    assert_grads(&[a.clone(), b], |g, v| g.matmul(v[0], v[1], false));
    assert_grads(&[a, bt], |g, v| g.matmul(v[0], v[1], true));
    let a3 = rand_array(&[2, 3, 4], &mut rng);
    let b3 = rand_array(&[2, 4, 2], &mut rng);
    let b3t = rand_array(&[2, 2, 4], &mut rng);
    assert_grads(&[a3.clone(), b3], |g, v| g.bmm(v[0], v[1], false));
    assert_grads(&[a3.clone(), b3t], |g, v| g.bmm(v[0], v[1], true));
    let w = rand_array(&[5, 3], &mut rng);
    let wt = rand_array(&[3, 5], &mut rng);
    let x = rand_array(&[2, 3, 4], &mut rng);
    assert_grads(&[w, x.clone()], |g, v| g.shared_matmul(v[0], v[1], false));
    assert_grads(&[wt, x], |g, v| g.shared_matmul(v[0], v[1], true));
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_array(&[2, 3, 4], &mut rng);
    let y = rand_array(&[2, 2, 4], &mut rng);
    assert_grads(&[x.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    assert_grads(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert_grads(&[x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1));
    assert_grads(&[x.clone()], |g, v| g.narrow(v[0], 2, 1, 2));
    assert_grads(&[x.clone()], |g, v| g.sum_axis(v[0], 1));
    assert_grads(&[x.clone()], |g, v| g.mean_axis(v[0], 0));
    assert_grads(&[x], |g, v| g.mean_all(v[0]));
    let shuf = rand_array(&[2, 8, 3, 2], &mut rng);
    assert_grads(&[shuf], |g, v| g.pixel_shuffle2(v[0]));
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_array(&[2, 3, 5], &mut rng);
    assert_grads(&[x.clone()], |g, v| g.softmax(v[0]));
    assert_grads(&[x.clone()], |g, v| g.layer_norm(v[0], 2, 1e-5));
    assert_grads(&[x], |g, v| g.layer_norm(v[0], 1, 1e-5));
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&[2, 2, 5, 4], &mut rng);
    assert_grads(&[x.clone()], |g, v| g.unfold(v[0], 3, 1, 1));
    assert_grads(&[x.clone()], |g, v| g.unfold(v[0], 2, 2, 0));
    assert_grads(&[x.clone()], |g, v| g.resize_bilinear(v[0], 9, 8));
    // Offsets away from integer sample positions keep bilinear sampling smooth.
    let off = rand_array(&[2, 18, 5, 4], &mut rng).mapv(|v| 1.3 * v + 0.37);
    assert_grads(&[x.clone(), off.clone()], |g, v| g.deform_unfold(v[0], v[1], 3));
    let w = rand_array(&[2, 9], &mut rng);
    assert_grads(&[x, off, w], |g, v| g.deform_depthwise(v[0], v[1], v[2], 3));
}

#[test]
fn deform_depthwise_matches_unfold_then_taps() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_array(&[2, 3, 5, 4], &mut rng);
    let off = rand_array(&[2, 18, 5, 4], &mut rng).mapv(|v| 1.5 * v);
    let w = rand_array(&[3, 9], &mut rng);
    let mut g = Graph::<f64>::new();
    let (xv, ov, wv) = (g.constant(x), g.constant(off), g.constant(w));
    let fused = g.deform_depthwise(xv, ov, wv, 3);
    let cols = g.deform_unfold(xv, ov, 3);
    let cols = g.reshape(cols, &[2, 3, 9, 20]);
    let w4 = g.reshape(wv, &[3, 9, 1]);
    let y = g.mul(cols, w4);
    let y = g.sum_axis(y, 2);
    let y = g.reshape(y, &[2, 3, 5, 4]);
    let diff = (g.value(fused) - g.value(y)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = rand_array(&[2, 3, 2, 2], &mut rng);
    let target: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let t2 = target.clone();
    let r = check(&[logits.clone()], 1e-5, move |g, v| g.cross_entropy(v[0], &t2));
    assert!(r[0].rel_error < 1e-7, "{r:?}");
    let probs = logits.mapv(|v| 0.5 + 0.4 * v);
    let r = check(&[probs], 1e-5, move |g, v| g.dice_loss(v[0], &target, 1e-5));
    assert!(r[0].rel_error < 1e-7, "{r:?}");
}

#[test]
fn deform_unfold_with_zero_offsets_is_unfold() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_array(&[1, 3, 6, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let off = g.constant(ArrayD::zeros(IxDyn(&[1, 18, 6, 5])));
    let a = g.unfold(xv, 3, 1, 1);
    let b = g.deform_unfold(xv, off, 3);
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn integer_offset_shifts_samples() {
    // A +1 column offset on every tap reads the next pixel to the right.
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut off = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 1, 4]));
    for p in 0..4 {
        off[[0, 1, 0, p]] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let ov = g.constant(off);
    let cols = g.deform_unfold(xv, ov, 1);
    assert_eq!(g.value(cols).as_slice().unwrap(), &[2.0, 3.0, 4.0, 0.0]);
}

#[test]
fn bilinear_matrix_rows_sum_to_one() {
    for (o, i) in [(56, 14), (9, 5), (4, 4), (3, 7)] {
        let m = bilinear_matrix::<f64>(o, i);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(bilinear_matrix::<f64>(5, 5), ndarray::Array2::<f64>::eye(5));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(ArrayD::from_elem(IxDyn(&[2]), 1.0));
    let b = g.constant(ArrayD::from_elem(IxDyn(&[2]), 3.0));
    let c = g.mul(a, b);
    let s = g.sum_all(c);
    let grads = g.backward(s);
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
}

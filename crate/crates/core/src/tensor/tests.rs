use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::gradient_check;
use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values kept away from ReLU/maxpool kinks so central differences
/// with h=1e-5 stay valid.
fn random_tensor_off_kinks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            while v.abs() < 5e-2 {
                v = rng.gen_range(-1.0..1.0);
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn relu_forward_matches_definition() {
    let mut g = Graph::new();
    let x = g.leaf(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.tensor(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv2d_all_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0f64));
    let k = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0f64));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.tensor(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.tensor(y).data(), &[9.0]);
}

#[test]
fn maxpool_takes_block_max() {
    let mut g = Graph::new();
    let x = g.leaf(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x, 2).unwrap();
    assert_eq!(g.tensor(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.tensor(y).data(), &[4.0]);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g.leaf(t64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).with_requires_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn softmax_ce_gradient_is_probs_minus_onehot() {
    // Single row: d loss / d z = softmax(z) - onehot(y), checked both
    // against the closed form and against central differences.
    let logits = [0.3f64, -1.1, 0.7];
    let label = 2usize;

    let mut g = Graph::new();
    let z = g.leaf(t64(&[1, 3], &logits).with_requires_grad());
    let loss = g.softmax_cross_entropy(z, &[label]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(z).unwrap().to_vec();

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for j in 0..3 {
        let p = exps[j] / sum;
        let expect = p - if j == label { 1.0 } else { 0.0 };
        assert!((grad[j] - expect).abs() < 1e-12, "closed form mismatch at {j}");
    }

    let err = gradient_check(
        |g, x| {
            let l = g.softmax_cross_entropy(x, &[label])?;
            Ok(l)
        },
        &t64(&[1, 3], &logits),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "finite-difference error {err}");
}

#[test]
fn conv_kernel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = random_tensor(&mut rng, &[1, 1, 5, 5]);
    let kernel = random_tensor(&mut rng, &[1, 1, 3, 3]);
    let err = gradient_check(
        |g, k| {
            let x = g.constant(image.clone());
            let y = g.conv2d(x, k, 1, 0)?;
            g.sum(y)
        },
        &kernel,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "kernel gradient error {err}");
}

#[test]
fn gradient_check_sum_of_squares() {
    let err = gradient_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        &t64(&[3], &[1.0, 2.0, 3.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "error {err}");
}

#[test]
fn gradient_check_constant_function_is_zero() {
    let err = gradient_check(
        |g, _x| {
            let c = g.constant(Tensor::scalar(5.0f64));
            Ok(c)
        },
        &t64(&[2], &[0.4, -0.2]),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn every_primitive_matches_finite_differences() {
    // One seed per op here; the acceptance suite widens this to 20+ seeds.
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // add + scale
    let p = random_tensor(&mut rng, &[4]);
    let other = random_tensor(&mut rng, &[4]);
    let o = other.clone();
    let err = gradient_check(
        |g, x| {
            let c = g.constant(o.clone());
            let s = g.add(x, c)?;
            let s = g.scale(s, 1.7)?;
            g.sum(s)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "add/scale error {err}");

    // mul
    let p = random_tensor(&mut rng, &[5]);
    let w = random_tensor(&mut rng, &[5]);
    let wc = w.clone();
    let err = gradient_check(
        |g, x| {
            let c = g.constant(wc.clone());
            let m = g.mul(x, c)?;
            g.sum(m)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "mul error {err}");

    // relu (inputs away from the kink)
    let p = random_tensor_off_kinks(&mut rng, &[6]);
    let err = gradient_check(
        |g, x| {
            let r = g.relu(x)?;
            g.sum(r)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "relu error {err}");

    // matmul both orientations
    for trans_b in [false, true] {
        let a = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, if trans_b { &[4, 3] } else { &[3, 4] });
        let bc = b.clone();
        let err = gradient_check(
            |g, x| {
                let c = g.constant(bc.clone());
                let m = g.matmul(x, c, trans_b)?;
                g.sum(m)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "matmul(trans_b={trans_b}) error {err}");
    }

    // add_bias on 2d and 4d, gradient w.r.t. the bias
    let bias = random_tensor(&mut rng, &[3]);
    let x2 = random_tensor(&mut rng, &[2, 3]);
    let x2c = x2.clone();
    let err = gradient_check(
        |g, b| {
            let x = g.constant(x2c.clone());
            let y = g.add_bias(x, b)?;
            g.sum(y)
        },
        &bias,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "add_bias 2d error {err}");

    let x4 = random_tensor(&mut rng, &[2, 3, 4, 4]);
    let x4c = x4.clone();
    let err = gradient_check(
        |g, b| {
            let x = g.constant(x4c.clone());
            let y = g.add_bias(x, b)?;
            g.sum(y)
        },
        &bias,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "add_bias 4d error {err}");

    // maxpool (distinct window values)
    let p = random_tensor_off_kinks(&mut rng, &[1, 2, 4, 4]);
    let err = gradient_check(
        |g, x| {
            let y = g.maxpool2d(x, 2)?;
            g.sum(y)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "maxpool error {err}");

    // affine sample, bilinear
    let p = random_tensor(&mut rng, &[1, 1, 5, 5]);
    let map = AffineMap::rotate_deg(30.0)
        .compose(&AffineMap::translate(-2.0, -2.0));
    let map = AffineMap::translate(2.0, 2.0).compose(&map).invert().unwrap();
    let err = gradient_check(
        |g, x| {
            let y = g.affine_sample(x, map, SampleMode::Bilinear)?;
            g.sum(y)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "affine_sample error {err}");
}

#[test]
fn backward_is_linear_over_summed_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = random_tensor(&mut rng, &[4]);
    let w1 = random_tensor(&mut rng, &[4]);
    let w2 = random_tensor(&mut rng, &[4]);

    let single = |w: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(point.clone().with_requires_grad());
        let c = g.constant(w.clone());
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let g1 = single(&w1);
    let g2 = single(&w2);

    let mut g = Graph::new();
    let x = g.leaf(point.clone().with_requires_grad());
    let c1 = g.constant(w1.clone());
    let c2 = g.constant(w2.clone());
    let m1 = g.mul(x, c1).unwrap();
    let m2 = g.mul(x, c2).unwrap();
    let s1 = g.sum(m1).unwrap();
    let s2 = g.sum(m2).unwrap();
    let total = g.add(s1, s2).unwrap();
    g.backward(total).unwrap();
    let combined = g.grad(x).unwrap();

    for i in 0..4 {
        assert!((combined[i] - (g1[i] + g2[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_bitwise() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(t64(&[1, 1, 4, 4], &(0..16).map(|i| (i as f64) * 0.3 - 2.0).collect::<Vec<_>>()));
        let k = g.leaf(t64(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64) * 0.1 - 0.9).collect::<Vec<_>>()));
        let c = g.conv2d(x, k, 1, 1).unwrap();
        let r = g.relu(c).unwrap();
        let p = g.maxpool2d(r, 2).unwrap();
        g.tensor(p).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn shape_mismatch_names_op_and_dims() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::zeros(vec![2, 4]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("add"), "{msg}");
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");

    let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = g.leaf(Tensor::zeros(vec![3, 5, 3, 3]));
    let err = g.conv2d(x, k, 1, 0).unwrap_err();
    assert!(err.to_string().contains("conv2d"), "{err}");
}

#[test]
fn double_backward_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(t64(&[1], &[1e308]));
    let doubled = g.scale(x, 10.0);
    assert!(matches!(doubled, Err(Error::NonFinite { .. })));
}

#[test]
fn requires_grad_propagates_and_constants_do_not_record() {
    let mut g = Graph::new();
    let x = g.constant(t64(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(!g.tensor(y).requires_grad());
    assert!(g.records.is_empty());

    let z = g.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad());
    let w = g.add(z, x).unwrap();
    assert!(g.tensor(w).requires_grad());
    assert_eq!(g.records.len(), 1);
}

#[test]
fn affine_map_inverse_round_trips() {
    let m = AffineMap::rotate_deg(37.0)
        .compose(&AffineMap::scale(1.2, 0.8))
        .compose(&AffineMap::translate(3.0, -1.5));
    let inv = m.invert().unwrap();
    let round = m.compose(&inv);
    let id = AffineMap::identity();
    for (a, b) in round.m.iter().zip(id.m.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

use discgen::distributions::Rng;
use discgen::gradcheck::{composite_suite, gradient_check, op_suite, tiny_arch, SUITE_OPS};
use discgen::graph::{BatchNormStats, Graph};
use discgen::kernels::{conv2d, conv2d_transpose};
use discgen::model::ModelBundle;
use discgen::nn::Mode;
use discgen::params::ParamStore;
use discgen::Tensor;

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_suite(20, 11).unwrap();
    assert_eq!(checks.len(), SUITE_OPS.len());
    for c in &checks {
        assert_eq!(c.instances, 20);
        assert!(c.max_rel_error <= 1e-4, "{}", c.line());
    }
}

#[test]
fn model_losses_match_finite_differences() {
    for c in composite_suite(64, 3).unwrap() {
        assert!(c.max_rel_error <= 1e-3, "{}", c.line());
    }
}

#[test]
fn matmul_three_by_four_by_five() {
    let mut rng = Rng::new(1);
    let mut s = ParamStore::new();
    let a = s.add_weight("a", rand(&mut rng, &[3, 4]));
    let b = s.add_weight("b", rand(&mut rng, &[4, 5]));
    let r = rand(&mut rng, &[3, 5]);
    let rep = gradient_check(
        &mut s,
        |g, s| {
            let (a, b) = (g.param(s, a), g.param(s, b));
            let y = g.matmul(a, b)?;
            let r = g.input(r.clone());
            let p = g.mul(y, r)?;
            let p = g.square(p);
            Ok(g.sum(p))
        },
        1e-6,
        usize::MAX,
        &mut rng,
    )
    .unwrap();
    assert_eq!(rep.coordinates, 32);
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn strided_conv_on_four_by_four() {
    let mut rng = Rng::new(2);
    let mut s = ParamStore::new();
    let x = s.add_weight("x", rand(&mut rng, &[1, 1, 4, 4]));
    let k = s.add_weight("k", rand(&mut rng, &[1, 1, 2, 2]));
    let mut g = Graph::new();
    let (xv, kv) = (g.param(&s, x), g.param(&s, k));
    let y = g.conv2d(xv, kv, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    let rep = gradient_check(
        &mut s,
        |g, s| {
            let (xv, kv) = (g.param(s, x), g.param(s, k));
            let y = g.conv2d(xv, kv, 2, 0)?;
            let y = g.square(y);
            Ok(g.sum(y))
        },
        1e-6,
        usize::MAX,
        &mut rng,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn conv_batchnorm_relu_composite() {
    let mut rng = Rng::new(3);
    let mut s = ParamStore::new();
    let x = s.add_weight("x", rand(&mut rng, &[3, 2, 6, 6]));
    let k = s.add_weight("k", rand(&mut rng, &[4, 2, 3, 3]));
    let gamma = s.add_weight("gamma", Tensor::from_f64(vec![4], &[1.0, 0.5, 1.5, 0.8]).unwrap());
    let beta = s.add_weight("beta", Tensor::from_f64(vec![4], &[0.1, -0.2, 0.0, 0.3]).unwrap());
    let r = rand(&mut rng, &[3, 4, 3, 3]);
    let rep = gradient_check(
        &mut s,
        |g, s| {
            let (xv, kv) = (g.param(s, x), g.param(s, k));
            let (gv, bv) = (g.param(s, gamma), g.param(s, beta));
            let y = g.conv2d(xv, kv, 2, 1)?;
            let (y, _) = g.batch_norm(y, gv, bv, BatchNormStats::Batch, 1e-5)?;
            let y = g.leaky_relu(y);
            let r = g.input(r.clone());
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        },
        1e-6,
        usize::MAX,
        &mut rng,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let mut rng = Rng::new(4);
    let mut g = Graph::new();
    let x = g.input(rand(&mut rng, &[5, 3, 4, 4]).map(|v| 3.0 * v + 2.0));
    let gamma = g.input(Tensor::ones(vec![3]));
    let beta = g.input(Tensor::zeros(vec![3]));
    let (y, _) = g.batch_norm(x, gamma, beta, BatchNormStats::Batch, 1e-5).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..5).flat_map(|n| y.data()[(n * 3 + c) * 16..][..16].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-6, "mean {m}");
        assert!((v - 1.0).abs() <= 1e-4, "var {v}");
    }
}

#[test]
fn encoder_mean_gradient() {
    let mut rng = Rng::new(5);
    let arch = tiny_arch();
    let mut b = ModelBundle::<f64>::init(&arch, &mut Rng::new(6)).unwrap();
    let x = rand(&mut rng, &[3, 1, 8, 8]);
    let enc = b.encoder.clone();
    let rep = gradient_check(
        &mut b.store,
        |g, s| {
            let xv = g.input(x.clone());
            let q = enc.forward(g, s, xv, Mode::Train)?;
            Ok(g.sum(q.mean))
        },
        1e-6,
        200,
        &mut rng,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
}

/// A size with `(size + 2·pad − k) % stride == 0`, so the transposed
/// convolution maps back to the original size.
fn fitted(rng: &mut Rng, k: usize, stride: usize, pad: usize) -> usize {
    let mut a = rng.below(5);
    loop {
        let h = (k + stride * a) as isize - 2 * pad as isize;
        if h >= 1 {
            return h as usize;
        }
        a += 1;
    }
}

#[test]
fn conv_transpose_is_the_adjoint_in_f64() {
    let mut rng = Rng::new(7);
    for _ in 0..50 {
        let (k, stride) = (1 + rng.below(4), 1 + rng.below(3));
        let pad = rng.below(k.min(3));
        let (h, w) = (fitted(&mut rng, k, stride, pad), fitted(&mut rng, k, stride, pad));
        let (n, c, f) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let x = rand(&mut rng, &[n, c, h, w]);
        let kern = rand(&mut rng, &[f, c, k, k]);
        let y_shape = conv2d(&x, &kern, stride, pad).unwrap().shape().to_vec();
        let y = rand(&mut rng, &y_shape);
        let lhs = conv2d(&x, &kern, stride, pad).unwrap().dot(&y).unwrap();
        let back = conv2d_transpose(&y, &kern, stride, pad).unwrap();
        assert_eq!(back.shape(), x.shape());
        let rhs = x.dot(&back).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs} for h={h} w={w} k={k} s={stride} p={pad}");
    }
}

#[test]
fn conv_transpose_adjoint_example_in_f32() {
    let mut rng = Rng::new(8);
    let y: Tensor<f32> = rand(&mut rng, &[1, 2, 5, 5]).cast();
    let k: Tensor<f32> = rand(&mut rng, &[2, 3, 3, 3]).cast();
    let up = conv2d_transpose(&y, &k, 2, 0).unwrap();
    assert_eq!(up.shape(), &[1, 3, 11, 11]);
    let x: Tensor<f32> = rand(&mut rng, &[1, 3, 11, 11]).cast();
    let lhs = up.dot(&x).unwrap();
    let rhs = conv2d(&x, &k, 2, 0).unwrap().dot(&y).unwrap();
    assert!((lhs - rhs).abs() <= 1e-5, "{lhs} vs {rhs}");
}

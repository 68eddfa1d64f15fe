mod common;

use common::{assert_close, random, Img};
use dseb_core::gradcheck::{analytic_grad, finite_difference_check, guarded_check_all, numeric_grad, scalar_fn};
use dseb_core::kernels::ConvGeom;
use dseb_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(shape, v).unwrap()
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let g = Graph::new();
    let out = g.leaf(x.clone()).conv2d(g.leaf(w.clone()), ConvGeom::new(stride, pad).unwrap()).unwrap();
    (*out.value()).clone()
}

#[test]
fn conv_of_ones() {
    let out = conv_value(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 2, 2]), 1, 0);
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert_eq!(out.data(), &[4.0; 4]);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 1, 5, 4], -1.0, 1.0);
    assert_eq!(conv_value(&x, &Tensor::ones(&[1, 1, 1, 1]), 1, 0), x);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let out = conv_value(&x, &w, 2, 1);
    let oracle = common::conv(&Img::from_tensor(&x), &w, 2, 1);
    assert_eq!(out.shape(), &[1, 3, oracle.h, oracle.w]);
    assert_close(out.data(), &oracle.data, 1e-12);
}

#[test]
fn conv_bias_broadcasts_per_channel() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
    let out = x
        .conv2d_bias(g.leaf(Tensor::ones(&[2, 1, 1, 1])), g.leaf(t(&[2], &[0.5, -1.0])), 1, 0)
        .unwrap();
    assert_eq!(out.value().data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_random_shapes_match_oracle(
        seed in 0u64..1000,
        c in 1usize..4,
        o in 1usize..4,
        k in 1usize..4,
        side in 3usize..9,
        stride in 1usize..4,
        pad in 0usize..3,
    ) {
        prop_assume!(side + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, c, side, side], -2.0, 2.0);
        let w = random(&mut rng, &[o, c, k, k], -2.0, 2.0);
        let out = conv_value(&x, &w, stride, pad);
        let oracle = common::conv(&Img::from_tensor(&x), &w, stride, pad);
        assert_close(out.data(), &oracle.data, 1e-12);
    }

    #[test]
    fn avg_downsample_matches_window_means(seed in 0u64..1000, c in 1usize..3, cells in 1usize..5, f in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, c, cells * f, cells * f], -2.0, 2.0);
        let g = Graph::new();
        let out = g.leaf(x.clone()).avg_downsample(f).unwrap();
        let oracle = common::pool(&Img::from_tensor(&x), f);
        assert_close(out.value().data(), &oracle.data, 1e-12);
    }

    #[test]
    fn elementwise_chain_matches_scalar_loop(seed in 0u64..1000, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (
            random(&mut rng, &[n], -2.0, 2.0),
            random(&mut rng, &[n], -2.0, 2.0),
            random(&mut rng, &[n], -2.0, 2.0),
        );
        let g = Graph::new();
        let (va, vb, vc) = (g.leaf(a.clone()), g.leaf(b.clone()), g.leaf(c.clone()));
        let out = va.add(vb).unwrap().mul(vc).unwrap().sub(va).unwrap().neg().unwrap().scale(0.5).unwrap();
        let oracle: Vec<f64> = (0..n)
            .map(|i| -((a.data()[i] + b.data()[i]) * c.data()[i] - a.data()[i]) * 0.5)
            .collect();
        assert_close(out.value().data(), &oracle, 1e-15);
        let total = out.sum_all().unwrap().item().unwrap();
        let mut acc = 0.0;
        for v in &oracle {
            acc += v;
        }
        prop_assert!((total - acc).abs() <= 1e-12 * acc.abs().max(1.0));
    }

    #[test]
    fn linearity_of_gradients(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[6], -2.0, 2.0);
        let f = scalar_fn(|_g: &Graph<f64>, v| v.mul(v)?.mul(v)?.sum_all());
        let h = scalar_fn(|_g: &Graph<f64>, v| v.relu()?.scale(1.5)?.sum_all());
        let combo = scalar_fn(|g: &Graph<f64>, v| {
            let fv = f(g, v)?.scale(a)?;
            fv.add(h(g, v)?.scale(b)?)
        });
        let (gf, gh, gc) = (analytic_grad(&f, &x).unwrap(), analytic_grad(&h, &x).unwrap(), analytic_grad(&combo, &x).unwrap());
        let expected: Vec<f64> = (0..6).map(|i| a * gf.data()[i] + b * gh.data()[i]).collect();
        assert_close(gc.data(), &expected, 1e-10);
    }
}

#[test]
fn relu_examples() {
    let g = Graph::new();
    let r = g.leaf(t(&[3], &[-1.0, 0.0, 2.0])).relu().unwrap();
    assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[40], -1.0, 1.0);
    let out = g.leaf(x.clone()).relu().unwrap();
    let oracle: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(out.value().data(), oracle.as_slice());
}

#[test]
fn fully_connected_examples() {
    let g = Graph::new();
    let x = t(&[3], &[0.5, -2.0, 4.0]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let out = g.leaf(x.clone()).fully_connected(g.leaf(eye), g.leaf(Tensor::zeros(&[3]))).unwrap();
    assert_eq!(out.value().data(), x.data());
    let b = t(&[2], &[0.25, -0.75]);
    let out = g.leaf(x.clone()).fully_connected(g.leaf(Tensor::zeros(&[2, 3])), g.leaf(b.clone())).unwrap();
    assert_eq!(out.value().data(), b.data());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[6], -1.0, 1.0);
    let w = random(&mut rng, &[2, 6], -1.0, 1.0);
    let b = random(&mut rng, &[2], -1.0, 1.0);
    let out = g.leaf(x.clone()).fully_connected(g.leaf(w.clone()), g.leaf(b.clone())).unwrap();
    assert_close(out.value().data(), &common::dense(&w, &b, x.data()), 1e-12);
}

#[test]
fn sum_all_examples() {
    let g = Graph::new();
    assert_eq!(g.leaf(Tensor::<f64>::ones(&[7])).sum_all().unwrap().item(), Some(7.0));
    assert_eq!(g.leaf(t(&[1], &[-3.5])).sum_all().unwrap().item(), Some(-3.5));
}

#[test]
fn avg_downsample_examples() {
    let g = Graph::new();
    let one = g.leaf(Tensor::<f64>::ones(&[1, 1, 2, 2])).avg_downsample(2).unwrap();
    assert_eq!(one.value().data(), &[1.0]);
    let m = g.leaf(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).avg_downsample(2).unwrap();
    assert_eq!(m.value().data(), &[4.0]);
    let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(*g.leaf(x.clone()).avg_downsample(1).unwrap().value(), x);
    assert!(g.leaf(x).avg_downsample(2).is_err());
}

#[test]
fn second_derivative_of_cube_against_finite_differences() {
    let g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let f = x.mul(x).unwrap().mul(x).unwrap().sum_all().unwrap();
    let d = g.grad(f, &[x], true).unwrap()[0];
    let h = g.grad(d.sum_all().unwrap(), &[x], false).unwrap()[0];
    assert_eq!(h.value().data(), &[6.0, 12.0]);
    let three_x2 = scalar_fn(|_g: &Graph<f64>, v| v.mul(v)?.scale(3.0)?.sum_all());
    let numeric = numeric_grad(&three_x2, &t(&[2], &[1.0, 2.0]), 1e-5).unwrap();
    assert_close(h.value().data(), numeric.data(), 1e-8);
}

#[test]
fn finite_difference_examples() {
    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let sum = scalar_fn(|_g: &Graph<f64>, v| v.sum_all());
    assert!(finite_difference_check(&sum, &x, 1e-5).unwrap() < 1e-10);
    let sq = scalar_fn(|_g: &Graph<f64>, v| v.mul(v)?.sum_all());
    assert!(finite_difference_check(&sq, &x, 1e-5).unwrap() < 1e-7);
    assert_eq!(analytic_grad(&sq, &x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn conv_relu_stack_gradient_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w1 = random(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
    let w2 = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let f = scalar_fn(|g: &Graph<f64>, v: Var<'_, f64>| {
        let h = v.conv2d(g.leaf(w1.clone()), ConvGeom::new(1, 1)?)?.relu()?;
        h.conv2d(g.leaf(w2.clone()), ConvGeom::new(2, 1)?)?.relu()?.sum_all()
    });
    // Redraw until every pre-activation is at least 1e-3 from its kink.
    let x = loop {
        let x = random(&mut rng, &[1, 1, 6, 6], -2.0, 2.0);
        let g = Graph::new();
        f(&g, g.leaf(x.clone())).unwrap();
        if g.relu_margin().unwrap() >= 1e-3 {
            break x;
        }
    };
    assert!(finite_difference_check(&f, &x, 1e-6).unwrap() < 1e-5);
    let guarded = guarded_check_all("stack", &f, &x, 1e-6).unwrap();
    assert_eq!(guarded.skipped, 0);
}

#[test]
fn forward_values_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let a = conv_value(&x, &w, 2, 1);
    let b = conv_value(&x, &w, 2, 1);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn unreachable_and_relu_negative_gradients_are_zero() {
    let g = Graph::new();
    let x = g.leaf(t(&[3], &[-1.0, -2.0, -0.5]));
    let other = g.leaf(t(&[2], &[1.0, 1.0]));
    let f = x.relu().unwrap().sum_all().unwrap();
    let d = g.grad(f, &[x, other], false).unwrap();
    assert_eq!(d[0].value().data(), &[0.0; 3]);
    assert_eq!(d[1].value().data(), &[0.0; 2]);
}

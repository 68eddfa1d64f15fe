mod common;

use common::{random, random_params, tiny_config};
use dseb_core::data::{apply_center_mask, ImagePair};
use dseb_core::energy_net::{init_params, EnergyNetParams};
use dseb_core::inference::InferenceConfig;
use dseb_core::training::{
    adam_step, l1_loss, outer_step, sample_loss_and_grad, train, AdamConfig, AdamState, TrainConfig,
};
use dseb_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn filled(params: &EnergyNetParams<f64>, value: f64) -> EnergyNetParams<f64> {
    params.map(|_, t| Tensor::full(t.shape(), value))
}

fn pairs(seed: u64, n: usize) -> Vec<ImagePair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| apply_center_mask(&random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0), 0.25).unwrap())
        .collect()
}

#[test]
fn l1_loss_and_subgradient_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
    let b = random(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
    let g = Graph::new();
    let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let loss = l1_loss(av, bv).unwrap();
    let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!((loss.item().unwrap() - want).abs() < 1e-12);
    let d = g.grad(loss, &[av], false).unwrap()[0].value();
    for ((x, y), s) in a.data().iter().zip(b.data()).zip(d.data()) {
        assert_eq!(*s, (x - y).signum());
    }
    let same = g.leaf(a.clone());
    let tie = l1_loss(same, same).unwrap();
    let d = g.grad(tie, &[same], false).unwrap()[0].value();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn first_adam_step_moves_by_lambda() {
    // m̂ = g and v̂ = g², so every entry moves by λ·g/(|g| + ε).
    let config = tiny_config();
    let mut params = init_params::<f64>(&config, 0).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let grads = filled(&params, 0.5);
    adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
    let step = 0.001 * 0.5 / (0.5 + 1e-8);
    for (p, q) in params.values().iter().zip(before.values()) {
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((b - a - step).abs() < 1e-15);
        }
    }
    assert_eq!(state.step, 1);
}

#[test]
fn two_adam_steps_match_scalar_recurrence() {
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = random_params(&config, &mut rng);
    let g1 = random_params(&config, &mut rng);
    let g2 = random_params(&config, &mut rng);
    let start = params.clone();
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lambda: 0.01,
        ..AdamConfig::default()
    };
    adam_step(&mut params, &g1, &mut state, &cfg).unwrap();
    adam_step(&mut params, &g2, &mut state, &cfg).unwrap();

    let flat = |p: &EnergyNetParams<f64>| -> Vec<f64> { p.values().iter().flat_map(|t| t.data().to_vec()).collect() };
    let (theta0, a, b) = (flat(&start), flat(&g1), flat(&g2));
    let mut want = Vec::new();
    for i in 0..theta0.len() {
        let (mut th, mut m, mut v) = (theta0[i], 0.0, 0.0);
        for (t, g) in [(1, a[i]), (2, b[i])] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        want.push(th);
    }
    common::assert_close(&flat(&params), &want, 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let config = tiny_config();
    let data = pairs(3, 2);
    let mut params = init_params::<f64>(&config, 0).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::new(1)
    };
    let batch: Vec<&ImagePair<f64>> = data.iter().collect();
    let init = Tensor::full(&[1, 1, 8, 8], 0.5);
    let loss = outer_step(&config, &batch, &mut params, &mut state, &init, &cfg).unwrap();
    assert_eq!(params, before);
    assert!(loss.loss_sum > 0.0);
    assert_eq!(loss.loss_per_pixel, loss.loss_sum / 64.0);
}

#[test]
fn no_inner_steps_means_no_gradient() {
    let config = tiny_config();
    let data = pairs(4, 1);
    let params = init_params::<f64>(&config, 0).unwrap();
    let init = Tensor::full(&[1, 1, 8, 8], 0.5);
    let inner = InferenceConfig {
        steps: 0,
        ..InferenceConfig::default()
    };
    let (loss, grads) = sample_loss_and_grad(&config, &data[0], &params, &init, &inner).unwrap();
    let want: f64 = data[0].y.data().iter().map(|v| (v - 0.5).abs()).sum();
    assert!((loss - want).abs() < 1e-12);
    assert!(grads.values().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

    let cfg = TrainConfig {
        inner,
        ..TrainConfig::new(3)
    };
    let report = train(&config, &data, &cfg).unwrap();
    assert_eq!(report.params, params);
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    // After one step the first moment is (1 - β1)·ḡ.
    let config = tiny_config();
    let data = pairs(5, 3);
    let params = init_params::<f64>(&config, 1).unwrap();
    let init = Tensor::full(&[1, 1, 8, 8], 0.5);
    let inner = InferenceConfig::default();
    let per: Vec<EnergyNetParams<f64>> = data
        .iter()
        .map(|p| sample_loss_and_grad(&config, p, &params, &init, &inner).unwrap().1)
        .collect();
    let mut updated = params.clone();
    let mut state = AdamState::new(&params);
    let batch: Vec<&ImagePair<f64>> = data.iter().collect();
    outer_step(&config, &batch, &mut updated, &mut state, &init, &TrainConfig::new(1)).unwrap();
    let n = params.values().len();
    for k in 0..n {
        for i in 0..params.values()[k].numel() {
            let mean: f64 = per.iter().map(|g| g.values()[k].data()[i]).sum::<f64>() / 3.0;
            let m = state.first_moment.values()[k].data()[i];
            assert!((m - 0.1 * mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let config = tiny_config();
    let data = pairs(6, 4);
    let cfg = TrainConfig {
        batch_size: 2,
        seed: 9,
        ..TrainConfig::new(4)
    };
    let a = train(&config, &data, &cfg).unwrap();
    let b = train(&config, &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 4);
}

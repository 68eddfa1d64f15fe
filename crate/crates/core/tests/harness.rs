mod common;

use common::{random, random_params, tiny_config};
use dseb_core::data::{apply_center_mask, ImagePair};
use dseb_core::energy_net::EnergyNetParams;
use dseb_core::harness::{
    baseline_report, composite, evaluate, mse255, peek_precision, psnr, Checkpoint, EvalOptions, EvalReport,
    ImageScore,
};
use dseb_core::inference::InferenceConfig;
use dseb_core::training::AdamState;
use dseb_core::{Precision, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar-loop MSE on the 0..255 scale.
fn mse_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = 255.0 * x - 255.0 * y;
        acc += d * d;
    }
    acc / a.numel() as f64
}

fn psnr_oracle(mse: f64) -> f64 {
    20.0 * (255.0f64).log10() - 10.0 * mse.log10()
}

fn testset(seed: u64, n: usize) -> Vec<ImagePair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| apply_center_mask(&random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0), 0.25).unwrap())
        .collect()
}

fn checkpoint(params: EnergyNetParams<f64>, mean: Tensor<f64>) -> Checkpoint<f64> {
    Checkpoint {
        config: tiny_config(),
        inference: InferenceConfig::default(),
        params,
        mean_image: mean,
        adam: None,
    }
}

#[test]
fn metrics_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = random(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let b = random(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let want = mse_oracle(&a, &b);
        let got = mse255(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-9 * want);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(want)).abs() < 1e-9);
    }
    let zero = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let one = Tensor::<f64>::ones(&[1, 1, 2, 2]);
    assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
    assert_eq!(psnr(&one, &one).unwrap(), f64::INFINITY);
    assert!(mse255(&zero, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
}

#[test]
fn zero_network_scores_as_mean_image() {
    let config = tiny_config();
    let test = testset(2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mean = random(&mut rng, &config.image_shape(), 0.0, 1.0);
    let ckpt = checkpoint(EnergyNetParams::zeros(&config), mean.clone());
    let options = EvalOptions {
        inference: InferenceConfig::default(),
        composite: false,
    };
    let (report, outputs) = evaluate(&ckpt, &test, &options).unwrap();
    assert!(outputs.iter().all(|o| *o == mean));
    assert_eq!(report, baseline_report(&mean, &test).unwrap());
    let mses: Vec<f64> = test.iter().map(|p| mse_oracle(&mean, &p.y)).collect();
    let psnr_mean = mses.iter().map(|&m| psnr_oracle(m)).sum::<f64>() / 6.0;
    assert!((report.mean_psnr - psnr_mean).abs() < 1e-9);
    assert!((report.mean_mse - mses.iter().sum::<f64>() / 6.0).abs() < 1e-9);
}

#[test]
fn unmasked_identity_composite_is_exact() {
    // Fraction 0 and T = 0: the composite keeps every known pixel, which is
    // the whole ground truth.
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let test: Vec<ImagePair<f64>> = (0..3)
        .map(|_| apply_center_mask(&random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0), 0.0).unwrap())
        .collect();
    let ckpt = checkpoint(random_params(&config, &mut rng), Tensor::full(&[1, 1, 8, 8], 0.5));
    let options = EvalOptions {
        inference: InferenceConfig {
            steps: 0,
            ..InferenceConfig::default()
        },
        composite: true,
    };
    let (report, _) = evaluate(&ckpt, &test, &options).unwrap();
    assert_eq!(report.mean_mse, 0.0);
    assert_eq!(report.mean_psnr, f64::INFINITY);
    assert_eq!(report.infinite_psnr, 3);
}

#[test]
fn composite_takes_only_the_hole() {
    let test = testset(5, 1);
    let fill = Tensor::full(&[1, 1, 8, 8], 0.7);
    let out = composite(&test[0], &fill).unwrap();
    for r in 0..8 {
        for c in 0..8 {
            let i = r * 8 + c;
            let want = if test[0].mask.is_occluded(r, c) { 0.7 } else { test[0].y.data()[i] };
            assert_eq!(out.data()[i], want);
        }
    }
}

#[test]
fn report_means_match_hand_averages() {
    let s = |mse: f64| ImageScore { mse, psnr: psnr_oracle(mse) };
    let r = EvalReport::from_scores(vec![s(10.0), s(100.0), s(1000.0), s(0.0)]).unwrap();
    assert!((r.mean_mse - 1110.0 / 4.0).abs() < 1e-12);
    let want = (psnr_oracle(10.0) + psnr_oracle(100.0) + psnr_oracle(1000.0)) / 3.0;
    assert!((r.mean_psnr - want).abs() < 1e-12);
    assert_eq!(r.infinite_psnr, 1);
    assert!(EvalReport::from_scores(vec![]).is_err());
}

#[test]
fn evaluate_names_the_mismatched_image() {
    let config = tiny_config();
    let mut test = testset(6, 3);
    test[2] = apply_center_mask(&Tensor::<f64>::zeros(&[1, 1, 6, 6]), 0.25).unwrap();
    let ckpt = checkpoint(EnergyNetParams::zeros(&config), Tensor::zeros(&[1, 1, 8, 8]));
    let options = EvalOptions {
        inference: InferenceConfig::default(),
        composite: false,
    };
    let err = evaluate(&ckpt, &test, &options).unwrap_err();
    assert!(err.to_string().contains("test image 2"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_files_round_trip(seed in any::<u64>(), with_adam in any::<bool>(), steps in 0usize..20) {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&config, &mut rng);
        let mut ckpt = checkpoint(params.clone(), random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0));
        ckpt.inference.steps = steps;
        if with_adam {
            let mut adam = AdamState::new(&params);
            adam.first_moment = random_params(&config, &mut rng);
            adam.second_moment = random_params(&config, &mut rng);
            adam.step = seed % 1000;
            ckpt.adam = Some(adam);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        prop_assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), ckpt.clone());
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(peek_precision(&bytes).unwrap(), Precision::Double);
    }
}

#[test]
fn checkpoints_cross_precision() {
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ckpt = checkpoint(random_params(&config, &mut rng), random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0));
    let narrow: Checkpoint<f32> = Checkpoint {
        config: ckpt.config.clone(),
        inference: ckpt.inference.clone(),
        params: ckpt.params.cast(),
        mean_image: ckpt.mean_image.cast(),
        adam: None,
    };
    let bytes = narrow.to_bytes().unwrap();
    assert_eq!(peek_precision(&bytes).unwrap(), Precision::Single);
    let wide = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(wide.params, narrow.params.cast::<f64>());
    let back = Checkpoint::<f32>::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back, narrow);
}

//! Bilevel training of the energy parameters.
//!
//! Each outer step unrolls the inner descent on the tape, measures the ℓ1
//! distance between the final estimate and the ground truth, and
//! backpropagates through the whole trajectory. The loss has no direct
//! parameter dependence, so detaching the inner estimate would give a zero
//! gradient: the unrolled path is the only signal.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImagePair;
use crate::energy_net::{init_params, EnergyNetConfig, EnergyNetParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inference::{mean_image, minimize_energy, unroll, InferenceConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Global gradient-norm bound applied when clipping is enabled.
pub const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of outer (parameter) updates.
    #[serde(rename = "M")]
    pub outer_steps: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_inner")]
    pub inner: InferenceConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Clip the global gradient norm at [`GRAD_CLIP_NORM`].
    #[serde(default)]
    pub grad_clip: bool,
}

fn default_lambda() -> f64 {
    0.001
}
fn default_inner() -> InferenceConfig {
    InferenceConfig {
        track_graph: true,
        ..Default::default()
    }
}
fn default_batch() -> usize {
    1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(outer_steps: usize) -> Self {
        TrainConfig {
            outer_steps,
            lambda: default_lambda(),
            inner: default_inner(),
            batch_size: default_batch(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            grad_clip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        self.inner.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lambda: self.lambda,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lambda: default_lambda(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moment estimates mirroring the parameter structure.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub first_moment: EnergyNetParams<S>,
    pub second_moment: EnergyNetParams<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &EnergyNetParams<S>) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape()));
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

fn same_layout<S: Scalar>(a: &EnergyNetParams<S>, b: &EnergyNetParams<S>, what: &str) -> Result<()> {
    let (ea, eb) = (a.entries(), b.entries());
    if ea.len() != eb.len()
        || ea
            .iter()
            .zip(&eb)
            .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
    {
        return Err(Error::shape("adam_step", format!("{what} do not mirror the parameters")));
    }
    Ok(())
}

/// One bias-corrected Adam update:
/// `m ← β1·m + (1-β1)·g`, `v ← β2·v + (1-β2)·g²`,
/// `θ ← θ - λ·m̂ / (sqrt(v̂) + ε)`.
pub fn adam_step<S: Scalar>(
    params: &mut EnergyNetParams<S>,
    grads: &EnergyNetParams<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    same_layout(params, grads, "gradients")?;
    same_layout(params, &state.first_moment, "first moments")?;
    same_layout(params, &state.second_moment, "second moments")?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() - S::of(cfg.beta1.powi(t));
    let c2 = S::one() - S::of(cfg.beta2.powi(t));
    let (lr, eps) = (S::of(cfg.lambda), S::of(cfg.eps));
    let grads = grads.values();
    let firsts = state.first_moment.values_mut();
    let seconds = state.second_moment.values_mut();
    for (((p, g), m), v) in params.values_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `Σ |y_hat - y|`, written as `sum(relu(y_hat - y) + relu(y - y_hat))`
/// so the subgradient at ties is 0.
pub fn l1_loss<'g, S: Scalar>(y_hat: Var<'g, S>, y: Var<'g, S>) -> Result<Var<'g, S>> {
    let d = y_hat.sub(y)?;
    d.relu()?.add(d.neg()?.relu()?)?.sum_all()
}

/// Loss of the unrolled estimate for one pair, and its gradient with
/// respect to every parameter.
pub fn sample_loss_and_grad<S: Scalar>(
    config: &EnergyNetConfig,
    pair: &ImagePair<S>,
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    inner: &InferenceConfig,
) -> Result<(S, EnergyNetParams<S>)> {
    let graph = Graph::new();
    let p = params.attach(&graph);
    let x = graph.leaf(pair.x.clone());
    let y = graph.leaf(pair.y.clone());
    let y0 = graph.leaf(init.clone());
    let inner = InferenceConfig {
        track_graph: true,
        ..inner.clone()
    };
    let run = unroll(config, &graph, x, &p, y0, &inner, false)?;
    let loss = l1_loss(run.estimate, y)?;
    let leaves: Vec<Var<'_, S>> = p.values().into_iter().copied().collect();
    let grads = graph.grad(loss, &leaves, false)?;
    let grads = params.with_values(grads.iter().map(|g| (*g.value()).clone()).collect())?;
    Ok((loss.item().expect("scalar loss"), grads))
}

/// Loss of one outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    /// Batch mean of the per-image ℓ1 sums.
    pub loss_sum: f64,
    /// `loss_sum` divided by the number of pixels of one image.
    pub loss_per_pixel: f64,
}

fn clip_global_norm<S: Scalar>(grads: &mut EnergyNetParams<S>, max_norm: f64) {
    let norm = grads
        .values()
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = S::of(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

/// Unrolls every pair of `batch`, averages the losses and gradients, and
/// applies one Adam update.
pub fn outer_step<S: Scalar>(
    config: &EnergyNetConfig,
    batch: &[&ImagePair<S>],
    params: &mut EnergyNetParams<S>,
    state: &mut AdamState<S>,
    init: &Tensor<S>,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let snapshot: &EnergyNetParams<S> = params;
    let results: Vec<Result<(S, EnergyNetParams<S>)>> = batch
        .par_iter()
        .map(|pair| sample_loss_and_grad(config, pair, snapshot, init, &cfg.inner))
        .collect();

    let n = S::of(batch.len() as f64);
    let mut loss = S::zero();
    let mut total: Option<EnergyNetParams<S>> = None;
    for (sample, r) in results.into_iter().enumerate() {
        let (l, g) = r.map_err(|e| match e {
            e @ (Error::NonFinite { .. } | Error::Diverged { .. }) => Error::NonFiniteLoss {
                sample,
                source: Box::new(e),
            },
            other => other,
        })?;
        loss += l;
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                for (a, b) in acc.values_mut().into_iter().zip(g.values()) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                acc
            }
        });
    }
    let mut grads = total.expect("non-empty batch");
    if batch.len() > 1 {
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v /= n;
            }
        }
    }
    if cfg.grad_clip {
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
    }
    adam_step(params, &grads, state, &cfg.adam())?;
    let loss_sum = (loss / n).to_f64().unwrap();
    Ok(StepLoss {
        loss_sum,
        loss_per_pixel: loss_sum / init.numel() as f64,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport<S> {
    /// One entry per outer step, `M` entries.
    pub losses: Vec<StepLoss>,
    pub wall_time: Duration,
    pub params: EnergyNetParams<S>,
    pub mean_image: Tensor<S>,
    pub adam: AdamState<S>,
}

/// Runs the full training loop: mean-image initialization, parameter
/// initialization, then `M` outer steps on batches drawn uniformly with
/// replacement.
pub fn train<S: Scalar>(
    config: &EnergyNetConfig,
    pairs: &[ImagePair<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport<S>> {
    train_with_progress(config, pairs, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after every outer step.
pub fn train_with_progress<S: Scalar>(
    config: &EnergyNetConfig,
    pairs: &[ImagePair<S>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &StepLoss),
) -> Result<TrainReport<S>> {
    config.validate()?;
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let start = Instant::now();
    let truths: Vec<Tensor<S>> = pairs.iter().map(|p| p.y.clone()).collect();
    let mean = mean_image(&truths)?;
    let mut params = init_params::<S>(config, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.outer_steps);
    for m in 0..cfg.outer_steps {
        let batch: Vec<&ImagePair<S>> = (0..cfg.batch_size)
            .map(|_| &pairs[rng.gen_range(0..pairs.len())])
            .collect();
        let loss = outer_step(config, &batch, &mut params, &mut adam, &mean, cfg)?;
        on_step(m, &loss);
        losses.push(loss);
    }
    Ok(TrainReport {
        losses,
        wall_time: start.elapsed(),
        params,
        mean_image: mean,
        adam,
    })
}

/// Mean ℓ1 loss of the (untracked) inference output over `pairs`.
pub fn dataset_loss<S: Scalar>(
    config: &EnergyNetConfig,
    pairs: &[ImagePair<S>],
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    inner: &InferenceConfig,
) -> Result<f64> {
    let cfg = InferenceConfig {
        track_graph: false,
        ..inner.clone()
    };
    let losses: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|pair| {
            let tr = minimize_energy(config, &pair.x, params, init, &cfg)?;
            Ok(tr
                .final_estimate
                .data()
                .iter()
                .zip(pair.y.data())
                .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
                .sum::<f64>())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

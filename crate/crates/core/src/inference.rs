//! Inpainting by gradient descent on the energy.
//!
//! Starting from the mean training image, the candidate is updated with
//! heavy-ball momentum:
//!
//! ```text
//! m_{t+1} = momentum * m_t + dE/dy_hat(y_hat_t)      m_0 = 0
//! y_hat_{t+1} = y_hat_t - alpha * m_{t+1}
//! ```
//!
//! With `track_graph` every update is recorded with differentiable gradients,
//! so the final estimate is a function of the parameters that training can
//! backpropagate through.

use serde::{Deserialize, Serialize};

use crate::energy_net::{self, EnergyNetConfig, EnergyNetParams, NetParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Number of descent steps.
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub track_graph: bool,
}

fn default_alpha() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_steps() -> usize {
    10
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: default_alpha(),
            momentum: default_momentum(),
            steps: default_steps(),
            track_graph: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace<S> {
    /// `E(y_hat_0) .. E(y_hat_T)`, `T + 1` values.
    pub energies: Vec<S>,
    pub final_estimate: Tensor<S>,
    /// `y_hat_0 .. y_hat_T`, when requested.
    pub snapshots: Option<Vec<Tensor<S>>>,
}

/// Elementwise mean of equally shaped images.
pub fn mean_image<S: Scalar>(images: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("mean of an empty image list"))?;
    let mut acc = vec![S::zero(); first.numel()];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape(
                "mean_image",
                format!("image {i} has shape {:?}, expected {:?}", img.shape(), first.shape()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let n = S::of(images.len() as f64);
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v / n).collect())
}

/// Result of [`unroll`]: the energies along the way and the final estimate
/// as a node of the caller's graph.
pub struct Unrolled<'g, S: Scalar> {
    pub energies: Vec<S>,
    pub estimate: Var<'g, S>,
    pub snapshots: Option<Vec<Tensor<S>>>,
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::NonFinite { .. } => Error::Diverged {
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Runs `cfg.steps` descent steps on `graph`. Parameters and `x` are nodes
/// the caller has already recorded; with `cfg.track_graph` the returned
/// estimate is differentiable with respect to them.
pub fn unroll<'g, S: Scalar>(
    config: &EnergyNetConfig,
    graph: &'g Graph<S>,
    x: Var<'g, S>,
    params: &NetParams<Var<'g, S>>,
    init: Var<'g, S>,
    cfg: &InferenceConfig,
    keep_snapshots: bool,
) -> Result<Unrolled<'g, S>> {
    cfg.validate()?;
    if init.shape() != x.shape() {
        return Err(Error::shape(
            "minimize_energy",
            format!("init {:?} vs x {:?}", init.shape(), x.shape()),
        ));
    }
    let alpha = S::of(cfg.alpha);
    let momentum = S::of(cfg.momentum);
    let features = energy_net::input_path_forward(config, x, params).map_err(at_step(0))?;
    let mark = graph.len();

    let mut y_hat = init;
    let mut velocity: Option<Var<'g, S>> = None;
    let mut energies = Vec::with_capacity(cfg.steps + 1);
    let mut snapshots = keep_snapshots.then(|| vec![(*init.value()).clone()]);
    for t in 0..cfg.steps {
        let step = || -> Result<(S, Var<'g, S>, Var<'g, S>)> {
            let e = energy_net::energy_with_features(config, &features, y_hat, params)?;
            let g = graph.grad(e, &[y_hat], cfg.track_graph)?[0];
            let m = match velocity {
                Some(m) => m.scale(momentum)?.add(g)?,
                None => g,
            };
            let next = y_hat.sub(m.scale(alpha)?)?;
            Ok((e.item().expect("scalar energy"), next, m))
        };
        let (e, next, m) = step().map_err(at_step(t))?;
        energies.push(e);
        if cfg.track_graph {
            y_hat = next;
            velocity = Some(m);
        } else {
            let (next, m) = ((*next.value()).clone(), (*m.value()).clone());
            graph.truncate(mark);
            y_hat = graph.leaf(next);
            velocity = Some(graph.leaf(m));
        }
        if let Some(s) = snapshots.as_mut() {
            s.push((*y_hat.value()).clone());
        }
    }
    let last = energy_net::energy_with_features(config, &features, y_hat, params)
        .map_err(at_step(cfg.steps))?;
    energies.push(last.item().expect("scalar energy"));
    Ok(Unrolled {
        energies,
        estimate: y_hat,
        snapshots,
    })
}

fn minimize<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    cfg: &InferenceConfig,
    keep_snapshots: bool,
) -> Result<InferenceTrace<S>> {
    let graph = Graph::new();
    let p = params.attach(&graph);
    let xv = graph.leaf(x.clone());
    let y0 = graph.leaf(init.clone());
    let run = unroll(config, &graph, xv, &p, y0, cfg, keep_snapshots)?;
    let final_estimate = (*run.estimate.value()).clone();
    Ok(InferenceTrace {
        energies: run.energies,
        final_estimate,
        snapshots: run.snapshots,
    })
}

pub fn minimize_energy<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace<S>> {
    minimize(config, x, params, init, cfg, false)
}

/// Like [`minimize_energy`], also returning every intermediate estimate.
pub fn minimize_energy_with_snapshots<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace<S>> {
    minimize(config, x, params, init, cfg, true)
}

/// Restores an occluded image: minimizes the energy from `mean_init`
/// without graph tracking and clamps the result to `[0, 1]`.
pub fn inpaint<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    params: &EnergyNetParams<S>,
    mean_init: &Tensor<S>,
    cfg: &InferenceConfig,
) -> Result<Tensor<S>> {
    let cfg = InferenceConfig {
        track_graph: false,
        ..cfg.clone()
    };
    let trace = minimize_energy(config, x, params, mean_init, &cfg)?;
    Ok(trace.final_estimate.clamp(S::zero(), S::one()))
}

/// Plain gradient descent with backtracking: each step starts from `alpha`
/// and halves it (at most `max_halvings` times) until the energy does not
/// increase. If no trial step qualifies the estimate stays put, so the
/// energy sequence is non-increasing.
pub fn descend_with_backtracking<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    params: &EnergyNetParams<S>,
    init: &Tensor<S>,
    alpha: f64,
    steps: usize,
    max_halvings: usize,
) -> Result<InferenceTrace<S>> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let graph = Graph::new();
    let p = params.attach(&graph);
    let xv = graph.leaf(x.clone());
    let features = energy_net::input_path_forward(config, xv, &p)?;
    let mark = graph.len();
    let energy_at = |y: &Tensor<S>| -> Result<S> {
        let yv = graph.leaf(y.clone());
        let e = energy_net::energy_with_features(config, &features, yv, &p)?
            .item()
            .expect("scalar energy");
        graph.truncate(mark);
        Ok(e)
    };

    let mut y = init.clone();
    let mut e = energy_at(&y).map_err(at_step(0))?;
    let mut energies = vec![e];
    for t in 0..steps {
        let yv = graph.leaf(y.clone());
        let grad = energy_net::energy_with_features(config, &features, yv, &p)
            .and_then(|ev| graph.grad(ev, &[yv], false))
            .map_err(at_step(t))?[0]
            .value();
        graph.truncate(mark);
        let mut step = S::of(alpha);
        for _ in 0..=max_halvings {
            let candidate = y.zip_map(&grad, "descent", |a, g| a - step * g)?;
            let ec = energy_at(&candidate).map_err(at_step(t + 1))?;
            if ec <= e {
                y = candidate;
                e = ec;
                break;
            }
            step = step / S::of(2.0);
        }
        energies.push(e);
    }
    Ok(InferenceTrace {
        energies,
        final_estimate: y,
        snapshots: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_net::init_params;

    fn tiny() -> EnergyNetConfig {
        EnergyNetConfig {
            num_conv_layers: 2,
            feature_maps: 2,
            kernel: 3,
            stride: vec![1],
            fc_dim: 1,
            input_channels: 1,
            image_side: 8,
        }
    }

    fn image(c: &EnergyNetConfig, phase: f64) -> Tensor<f64> {
        Tensor::from_fn(&c.image_shape(), |i| 0.5 + 0.4 * (i as f64 * 0.3 + phase).sin())
    }

    #[test]
    fn mean_of_zeros_and_ones() {
        let m = mean_image(&[Tensor::<f64>::zeros(&[2, 2]), Tensor::ones(&[2, 2])]).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
        let single = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        assert_eq!(mean_image(std::slice::from_ref(&single)).unwrap(), single);
    }

    #[test]
    fn mean_errors() {
        assert!(mean_image::<f64>(&[]).is_err());
        assert!(mean_image(&[Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn zero_steps_return_init() {
        let c = tiny();
        let p = init_params::<f64>(&c, 1).unwrap();
        let cfg = InferenceConfig {
            steps: 0,
            ..Default::default()
        };
        let init = image(&c, 1.0);
        let tr = minimize_energy(&c, &image(&c, 0.0), &p, &init, &cfg).unwrap();
        assert_eq!(tr.energies.len(), 1);
        assert_eq!(tr.final_estimate, init);
    }

    #[test]
    fn zero_params_leave_init_unchanged() {
        let c = tiny();
        let p = EnergyNetParams::<f64>::zeros(&c);
        let init = image(&c, 1.0);
        for track_graph in [false, true] {
            let cfg = InferenceConfig {
                track_graph,
                ..Default::default()
            };
            let tr = minimize_energy(&c, &image(&c, 0.0), &p, &init, &cfg).unwrap();
            assert_eq!(tr.final_estimate, init);
            assert_eq!(tr.energies.len(), cfg.steps + 1);
        }
    }

    #[test]
    fn tracked_and_untracked_agree() {
        let c = tiny();
        let p = init_params::<f64>(&c, 5).unwrap();
        let x = image(&c, 0.2);
        let init = image(&c, 2.0);
        let mut cfg = InferenceConfig {
            steps: 4,
            ..Default::default()
        };
        let a = minimize_energy(&c, &x, &p, &init, &cfg).unwrap();
        cfg.track_graph = true;
        let b = minimize_energy(&c, &x, &p, &init, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snapshots_follow_the_trajectory() {
        let c = tiny();
        let p = init_params::<f64>(&c, 5).unwrap();
        let cfg = InferenceConfig {
            steps: 3,
            ..Default::default()
        };
        let tr =
            minimize_energy_with_snapshots(&c, &image(&c, 0.0), &p, &image(&c, 1.0), &cfg).unwrap();
        let snaps = tr.snapshots.unwrap();
        assert_eq!(snaps.len(), 4);
        assert_eq!(snaps[3], tr.final_estimate);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            InferenceConfig {
                alpha: 0.0,
                ..Default::default()
            },
            InferenceConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn inpaint_clamps() {
        let c = tiny();
        let p = EnergyNetParams::<f64>::zeros(&c);
        let init = Tensor::from_fn(&c.image_shape(), |i| i as f64 / 32.0 - 0.5);
        let out = inpaint(&c, &image(&c, 0.0), &p, &init, &Default::default()).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out, init.clamp(0.0, 1.0));
    }

    #[test]
    fn divergence_names_the_step() {
        let c = tiny();
        let mut p = init_params::<f64>(&c, 2).unwrap();
        for w in p.values_mut() {
            *w = w.map(|v| v * 1e120);
        }
        let err = minimize_energy(&c, &image(&c, 0.0), &p, &image(&c, 1.0), &Default::default())
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}

//! Ready-made gradient checks on small random problems.

use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{guarded_check_all, GuardedCheck};
use crate::data::ImagePair;
use crate::energy_net::{energy, init_params, EnergyNetConfig, EnergyNetParams, Role};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::inference::{unroll, InferenceConfig};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;
use crate::training::{l1_loss, sample_loss_and_grad};

pub const FIRST_ORDER_TOL: f64 = 1e-5;
pub const SECOND_ORDER_TOL: f64 = 1e-3;

const EPS: f64 = 1e-6;

/// 8×8 grayscale, two layers of two maps, 3×3 kernels, stride 1.
pub fn tiny_config() -> EnergyNetConfig {
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

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Uniform::new(lo, hi);
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Initialized parameters with small random biases, so bias gradients are
/// exercised too.
pub fn random_params(config: &EnergyNetConfig, rng: &mut ChaCha8Rng) -> Result<EnergyNetParams<f64>> {
    let base = init_params::<f64>(config, Uniform::new(0, u64::MAX).sample(rng))?;
    Ok(base.map(|name, t| {
        if name.role == Role::Bias {
            uniform(t.shape(), -0.1, 0.1, rng)
        } else {
            t.clone()
        }
    }))
}

fn weighted<'g>(v: Var<'g, f64>, r: &Tensor<f64>) -> Result<Var<'g, f64>> {
    v.mul(v.graph().leaf(r.clone()))?.sum_all()
}

/// Replaces parameter entry `index` with `v`.
fn substitute<'g>(
    params: &EnergyNetParams<f64>,
    g: &'g Graph<f64>,
    index: usize,
    v: Var<'g, f64>,
) -> Result<crate::energy_net::NetParams<Var<'g, f64>>> {
    let mut vars: Vec<Var<'g, f64>> = params.attach(g).values().into_iter().copied().collect();
    vars[index] = v;
    params.with_values(vars)
}

/// First-order checks of every differentiable operation and of the full
/// energy with respect to `x`, `ŷ` and each parameter tensor.
pub fn first_order_suite(seed: u64) -> Result<Vec<GuardedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let f = super::scalar_fn(|$g: &Graph<f64>, $v: Var<'_, f64>| $body);
            out.push(guarded_check_all($name, &f, &$x, EPS)?);
        }};
    }

    let x = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let r = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    check!("add", x, |g, v| weighted(v.add(g.leaf(b.clone()))?, &r));
    check!("sub", x, |g, v| weighted(g.leaf(b.clone()).sub(v)?, &r));
    check!("mul", x, |g, v| weighted(v.mul(g.leaf(b.clone()))?, &r));
    check!("mul_self", x, |_g, v| weighted(v.mul(v)?, &r));
    check!("neg", x, |_g, v| weighted(v.neg()?, &r));
    check!("scale", x, |_g, v| weighted(v.scale(-1.7)?, &r));
    check!("relu", x, |_g, v| weighted(v.relu()?, &r));
    check!("sum_all", x, |_g, v| v.sum_all()?.scale(2.5));
    let s = uniform(&[1], -1.0, 1.0, &mut rng);
    check!("broadcast", s, |_g, v| weighted(v.broadcast_to(&[2, 3])?, &r));
    let r32 = uniform(&[3, 2], -1.0, 1.0, &mut rng);
    check!("reshape", x, |_g, v| weighted(v.reshape(&[3, 2])?, &r32));

    let img = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let geom = ConvGeom::new(stride, pad)?;
        let side = geom.out_len(6, 3)?;
        let rc = uniform(&[1, 3, side, side], -1.0, 1.0, &mut rng);
        check!(format!("conv2d_s{stride}p{pad}.input"), img, |g, v| {
            weighted(v.conv2d(g.leaf(w.clone()), geom)?, &rc)
        });
        check!(format!("conv2d_s{stride}p{pad}.weight"), w, |g, v| {
            weighted(g.leaf(img.clone()).conv2d(v, geom)?, &rc)
        });
    }
    let bias = uniform(&[3], -1.0, 1.0, &mut rng);
    let rb = uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
    check!("conv2d_bias.bias", bias, |g, v| {
        weighted(g.leaf(img.clone()).conv2d_bias(g.leaf(w.clone()), v, 1, 1)?, &rb)
    });
    let rd = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    check!("avg_downsample", img, |_g, v| weighted(v.avg_downsample(2)?, &rd));

    let m = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let vec6 = uniform(&[6], -1.0, 1.0, &mut rng);
    let r4 = uniform(&[4], -1.0, 1.0, &mut rng);
    check!("matvec.matrix", m, |g, v| weighted(v.matvec(g.leaf(vec6.clone()))?, &r4));
    check!("matvec.vector", vec6, |g, v| weighted(g.leaf(m.clone()).matvec(v)?, &r4));
    let fb = uniform(&[4], -1.0, 1.0, &mut rng);
    check!("fully_connected.input", x, |g, v| {
        weighted(v.fully_connected(g.leaf(m.clone()), g.leaf(fb.clone()))?, &r4)
    });

    let config = tiny_config();
    let params = random_params(&config, &mut rng)?;
    let shape = config.image_shape();
    let xi = uniform(&shape, 0.0, 1.0, &mut rng);
    let yi = uniform(&shape, 0.0, 1.0, &mut rng);
    check!("energy.y_hat", yi, |g, v| energy(&config, g.leaf(xi.clone()), v, &params.attach(g)));
    check!("energy.x", xi, |g, v| energy(&config, v, g.leaf(yi.clone()), &params.attach(g)));
    for (i, (name, t)) in params.entries().into_iter().enumerate() {
        check!(format!("energy.{name}"), *t, |g, v| {
            let p = substitute(&params, g, i, v)?;
            energy(&config, g.leaf(xi.clone()), g.leaf(yi.clone()), &p)
        });
    }
    Ok(out)
}

/// Checks gradients of gradients: each function below is itself an inner
/// product of a reverse-mode gradient (recorded with `create_graph`) with a
/// fixed direction.
pub fn second_order_suite(seed: u64) -> Result<Vec<GuardedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let f = super::scalar_fn(|$g: &Graph<f64>, $v: Var<'_, f64>| $body);
            out.push(guarded_check_all($name, &f, &$x, 1e-5)?);
        }};
    }

    let x = uniform(&[5], -1.0, 1.0, &mut rng);
    let s5 = uniform(&[5], -1.0, 1.0, &mut rng);
    check!("cube", x, |g, v| {
        let f = v.mul(v)?.mul(v)?.sum_all()?;
        weighted(g.grad(f, &[v], true)?[0], &s5)
    });

    let img = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let geom = ConvGeom::new(2, 1)?;
    let rc = uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut rng);
    let s_img = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
    let s_w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    check!("conv2d.input_grad_by_weight", w, |g, v| {
        let xi = g.leaf(img.clone());
        let f = weighted(xi.conv2d(v, geom)?, &rc)?;
        weighted(g.grad(f, &[xi], true)?[0], &s_img)
    });
    check!("conv2d.weight_grad_by_input", img, |g, v| {
        let wi = g.leaf(w.clone());
        let f = weighted(v.conv2d(wi, geom)?, &rc)?;
        weighted(g.grad(f, &[wi], true)?[0], &s_w)
    });
    check!("conv2d_relu.mixed", img, |g, v| {
        let wi = g.leaf(w.clone());
        let f = weighted(v.conv2d(wi, geom)?.relu()?.mul(v.conv2d(wi, geom)?)?, &rc)?;
        weighted(g.grad(f, &[v], true)?[0], &s_img)
    });

    let m = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let vec6 = uniform(&[6], -1.0, 1.0, &mut rng);
    let r4 = uniform(&[4], -1.0, 1.0, &mut rng);
    let s6 = uniform(&[6], -1.0, 1.0, &mut rng);
    check!("matvec.vector_grad_by_matrix", m, |g, v| {
        let xi = g.leaf(vec6.clone());
        let f = weighted(v.matvec(xi)?, &r4)?;
        weighted(g.grad(f, &[xi], true)?[0], &s6)
    });
    let pooled = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    check!("avg_downsample.squared", img, |g, v| {
        let f = weighted(v.avg_downsample(2)?.mul(v.avg_downsample(2)?)?, &pooled)?;
        weighted(g.grad(f, &[v], true)?[0], &s_img)
    });

    let config = tiny_config();
    let params = random_params(&config, &mut rng)?;
    let shape = config.image_shape();
    let xi = uniform(&shape, 0.0, 1.0, &mut rng);
    let yi = uniform(&shape, 0.0, 1.0, &mut rng);
    let sy = uniform(&shape, -1.0, 1.0, &mut rng);
    for (i, (name, t)) in params.entries().into_iter().enumerate() {
        check!(format!("energy_grad_y_hat.{name}"), *t, |g, v| {
            let p = substitute(&params, g, i, v)?;
            let yv = g.leaf(yi.clone());
            let e = energy(&config, g.leaf(xi.clone()), yv, &p)?;
            weighted(g.grad(e, &[yv], true)?[0], &sy)
        });
    }
    Ok(out)
}

/// Loss of the tracked `T`-step unroll and the ReLU pattern of its tape.
fn unrolled_loss(
    config: &EnergyNetConfig,
    pair: &ImagePair<f64>,
    params: &EnergyNetParams<f64>,
    init: &Tensor<f64>,
    inner: &InferenceConfig,
) -> Result<(f64, Vec<bool>)> {
    let g = Graph::new();
    let p = params.attach(&g);
    let run = unroll(config, &g, g.leaf(pair.x.clone()), &p, g.leaf(init.clone()), inner, false)?;
    let loss = l1_loss(run.estimate, g.leaf(pair.y.clone()))?;
    Ok((loss.item().expect("scalar loss"), g.relu_pattern()))
}

/// Inner loop used by [`unrolled_check`]: larger than the default step so
/// the loss depends strongly on the parameters.
pub fn unrolled_inner(steps: usize) -> InferenceConfig {
    InferenceConfig {
        alpha: 0.1,
        momentum: 0.9,
        steps,
        track_graph: true,
    }
}

/// Compares the unrolled outer gradient on the tiny network with central
/// differences on `n_params` parameter scalars drawn without replacement.
pub fn unrolled_check(seed: u64, steps: usize, n_params: usize) -> Result<GuardedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = tiny_config();
    let params = random_params(&config, &mut rng)?;
    let shape = config.image_shape();
    let pair = ImagePair::from_mask(
        &uniform(&shape, 0.0, 1.0, &mut rng),
        crate::data::center_mask(config.image_side, 0.25)?,
    )?;
    let init = uniform(&shape, 0.0, 1.0, &mut rng);
    let inner = unrolled_inner(steps);

    let (_, grads) = sample_loss_and_grad(&config, &pair, &params, &init, &inner)?;
    let (_, base) = unrolled_loss(&config, &pair, &params, &init, &inner)?;
    let sizes: Vec<usize> = params.values().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks = sample(&mut rng, total, n_params.min(total)).into_vec();
    picks.sort_unstable();

    let mut check = GuardedCheck {
        name: format!("unrolled_T{steps}"),
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for flat in picks {
        let (mut tensor, mut index) = (0, flat);
        while index >= sizes[tensor] {
            index -= sizes[tensor];
            tensor += 1;
        }
        let mut probe = params.clone();
        let orig = params.values()[tensor].data()[index];
        let mut eval_at = |v: f64| {
            probe.values_mut()[tensor].data_mut()[index] = v;
            unrolled_loss(&config, &pair, &probe, &init, &inner)
        };
        let (plus, p_plus) = eval_at(orig + EPS)?;
        let (minus, p_minus) = eval_at(orig - EPS)?;
        if p_plus != base || p_minus != base {
            check.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * EPS);
        let analytic = grads.values()[tensor].data()[index];
        check.max_error = check.max_error.max(super::relative_error(analytic, numeric));
        check.checked += 1;
    }
    Ok(check)
}

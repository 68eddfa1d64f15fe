//! Two-path convolutional energy network.
//!
//! The input path reads the occluded image `x`:
//! `u_{l+1} = relu(conv(u_l, W_u) + b_u)` with `u_0 = x`, followed by one
//! fully connected layer.
//!
//! The output path reads a candidate restoration `y_hat`:
//! `v_{l+1} = relu(conv(v_l, W_v) + conv(u_l, W_cross) + conv(z_l, W_z) + b_v)`
//! with `v_0 = y_hat`, where `z_l` is `y_hat` average-pooled to the spatial
//! size of `v_l`. Layer 0 has no cross or `z` terms. A fully connected layer
//! closes the path.
//!
//! The energy is the sum of the elementwise sum of both fully connected
//! outputs.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyNetConfig {
    #[serde(default = "defaults::num_conv_layers")]
    pub num_conv_layers: usize,
    #[serde(default = "defaults::feature_maps")]
    pub feature_maps: usize,
    #[serde(default = "defaults::kernel")]
    pub kernel: usize,
    /// One stride for every layer, or one per layer. Accepts a number or an
    /// array in JSON.
    #[serde(default = "defaults::stride", deserialize_with = "stride_list")]
    pub stride: Vec<usize>,
    #[serde(default = "defaults::fc_dim")]
    pub fc_dim: usize,
    #[serde(default = "defaults::input_channels")]
    pub input_channels: usize,
    pub image_side: usize,
}

mod defaults {
    pub fn num_conv_layers() -> usize {
        3
    }
    pub fn feature_maps() -> usize {
        32
    }
    pub fn kernel() -> usize {
        5
    }
    pub fn stride() -> Vec<usize> {
        vec![2]
    }
    pub fn fc_dim() -> usize {
        1
    }
    pub fn input_channels() -> usize {
        1
    }
}

fn stride_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl EnergyNetConfig {
    /// Default widths (3 layers, 32 maps, 5×5 kernels, stride 2, one FC
    /// output) for square images of the given side and channel count.
    pub fn with_image(image_side: usize, input_channels: usize) -> Self {
        EnergyNetConfig {
            num_conv_layers: defaults::num_conv_layers(),
            feature_maps: defaults::feature_maps(),
            kernel: defaults::kernel(),
            stride: defaults::stride(),
            fc_dim: defaults::fc_dim(),
            input_channels,
            image_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.num_conv_layers == 0 || self.feature_maps == 0 || self.fc_dim == 0 {
            return bad("num_conv_layers, feature_maps and fc_dim must be at least 1".into());
        }
        if self.input_channels == 0 || self.image_side == 0 {
            return bad("input_channels and image_side must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.stride.len() != 1 && self.stride.len() != self.num_conv_layers {
            return bad(format!(
                "stride lists {} values for {} layers",
                self.stride.len(),
                self.num_conv_layers
            ));
        }
        let mut side = self.image_side;
        for l in 0..self.num_conv_layers {
            let s = self.stride_at(l);
            if s == 0 || side % s != 0 {
                return bad(format!(
                    "layer {l}: stride {s} does not divide spatial size {side}"
                ));
            }
            side /= s;
        }
        Ok(())
    }

    pub fn stride_at(&self, layer: usize) -> usize {
        if self.stride.len() == 1 {
            self.stride[0]
        } else {
            self.stride[layer]
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    fn geom(&self, layer: usize) -> ConvGeom {
        ConvGeom {
            stride: self.stride_at(layer),
            padding: self.padding(),
        }
    }

    /// Spatial side of the feature maps entering layer `layer`; `layer ==
    /// num_conv_layers` gives the side of the last maps.
    pub fn side_at(&self, layer: usize) -> usize {
        (0..layer).fold(self.image_side, |side, l| side / self.stride_at(l))
    }

    /// Pooling factor that brings the image down to `side_at(layer)`.
    pub fn pool_factor(&self, layer: usize) -> usize {
        (0..layer).map(|l| self.stride_at(l)).product()
    }

    /// Shape of one image: `1×C×side×side`.
    pub fn image_shape(&self) -> [usize; 4] {
        [1, self.input_channels, self.image_side, self.image_side]
    }

    fn fc_inputs(&self) -> usize {
        let side = self.side_at(self.num_conv_layers);
        self.feature_maps * side * side
    }

    /// Shape of every parameter tensor.
    pub fn param_shapes(&self) -> NetParams<Vec<usize>> {
        let (k, c, ks) = (self.feature_maps, self.input_channels, self.kernel);
        let in_ch = |l: usize| if l == 0 { c } else { k };
        let dense = Dense {
            weight: vec![self.fc_dim, self.fc_inputs()],
            bias: vec![self.fc_dim],
        };
        NetParams {
            input_conv: (0..self.num_conv_layers)
                .map(|l| ConvLayer {
                    weight: vec![k, in_ch(l), ks, ks],
                    bias: vec![k],
                })
                .collect(),
            input_fc: dense.clone(),
            output_conv: (0..self.num_conv_layers)
                .map(|l| OutputLayer {
                    weight_v: vec![k, in_ch(l), ks, ks],
                    weight_cross: (l > 0).then(|| vec![k, k, ks, ks]),
                    weight_z: (l > 0).then(|| vec![k, c, ks, ks]),
                    bias: vec![k],
                })
                .collect(),
            output_fc: dense,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PathKind {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    /// Output path weight applied to the previous output-path maps.
    WeightV,
    /// Output path weight applied to the input-path maps.
    WeightCross,
    /// Output path weight applied to the pooled candidate image.
    WeightZ,
    Bias,
}

/// Identifies one parameter tensor: path, conv layer (`None` for the fully
/// connected layer) and role. Displays as e.g. `output.conv1.weight_z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamName {
    pub path: PathKind,
    pub layer: Option<usize>,
    pub role: Role,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = match self.path {
            PathKind::Input => "input",
            PathKind::Output => "output",
        };
        let role = match self.role {
            Role::Weight => "weight",
            Role::WeightV => "weight_v",
            Role::WeightCross => "weight_u",
            Role::WeightZ => "weight_z",
            Role::Bias => "bias",
        };
        match self.layer {
            Some(l) => write!(f, "{path}.conv{l}.{role}"),
            None => write!(f, "{path}.fc.{role}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer<T> {
    pub weight_v: T,
    /// Absent on layer 0.
    pub weight_cross: Option<T>,
    /// Absent on layer 0.
    pub weight_z: Option<T>,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

/// Parameter set of both paths. Generic over the leaf type so the same
/// structure carries tensors, graph handles, gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub input_conv: Vec<ConvLayer<T>>,
    pub input_fc: Dense<T>,
    pub output_conv: Vec<OutputLayer<T>>,
    pub output_fc: Dense<T>,
}

pub type EnergyNetParams<S> = NetParams<Tensor<S>>;

impl<T> NetParams<T> {
    /// Applies `f` to every entry in canonical order.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(ParamName, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<NetParams<U>, E> {
        use PathKind::*;
        use Role::*;
        let name = |path, layer, role| ParamName { path, layer, role };
        let mut input_conv = Vec::with_capacity(self.input_conv.len());
        for (l, c) in self.input_conv.iter().enumerate() {
            input_conv.push(ConvLayer {
                weight: f(name(Input, Some(l), Weight), &c.weight)?,
                bias: f(name(Input, Some(l), Bias), &c.bias)?,
            });
        }
        let input_fc = Dense {
            weight: f(name(Input, None, Weight), &self.input_fc.weight)?,
            bias: f(name(Input, None, Bias), &self.input_fc.bias)?,
        };
        let mut output_conv = Vec::with_capacity(self.output_conv.len());
        for (l, c) in self.output_conv.iter().enumerate() {
            let weight_v = f(name(Output, Some(l), WeightV), &c.weight_v)?;
            let weight_cross = match &c.weight_cross {
                Some(w) => Some(f(name(Output, Some(l), WeightCross), w)?),
                None => None,
            };
            let weight_z = match &c.weight_z {
                Some(w) => Some(f(name(Output, Some(l), WeightZ), w)?),
                None => None,
            };
            output_conv.push(OutputLayer {
                weight_v,
                weight_cross,
                weight_z,
                bias: f(name(Output, Some(l), Bias), &c.bias)?,
            });
        }
        let output_fc = Dense {
            weight: f(name(Output, None, Weight), &self.output_fc.weight)?,
            bias: f(name(Output, None, Bias), &self.output_fc.bias)?,
        };
        Ok(NetParams {
            input_conv,
            input_fc,
            output_conv,
            output_fc,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(ParamName, &T) -> U) -> NetParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Every entry with its name, in canonical order.
    pub fn entries(&self) -> Vec<(ParamName, &T)> {
        let mut out = Vec::new();
        for (l, c) in self.input_conv.iter().enumerate() {
            out.push((pname(PathKind::Input, Some(l), Role::Weight), &c.weight));
            out.push((pname(PathKind::Input, Some(l), Role::Bias), &c.bias));
        }
        out.push((pname(PathKind::Input, None, Role::Weight), &self.input_fc.weight));
        out.push((pname(PathKind::Input, None, Role::Bias), &self.input_fc.bias));
        for (l, c) in self.output_conv.iter().enumerate() {
            out.push((pname(PathKind::Output, Some(l), Role::WeightV), &c.weight_v));
            if let Some(w) = &c.weight_cross {
                out.push((pname(PathKind::Output, Some(l), Role::WeightCross), w));
            }
            if let Some(w) = &c.weight_z {
                out.push((pname(PathKind::Output, Some(l), Role::WeightZ), w));
            }
            out.push((pname(PathKind::Output, Some(l), Role::Bias), &c.bias));
        }
        out.push((pname(PathKind::Output, None, Role::Weight), &self.output_fc.weight));
        out.push((pname(PathKind::Output, None, Role::Bias), &self.output_fc.bias));
        out
    }

    pub fn values(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable references in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for c in &mut self.input_conv {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.input_fc.weight);
        out.push(&mut self.input_fc.bias);
        for c in &mut self.output_conv {
            out.push(&mut c.weight_v);
            if let Some(w) = &mut c.weight_cross {
                out.push(w);
            }
            if let Some(w) = &mut c.weight_z {
                out.push(w);
            }
            out.push(&mut c.bias);
        }
        out.push(&mut self.output_fc.weight);
        out.push(&mut self.output_fc.bias);
        out
    }

    /// Rebuilds a parameter set with this structure from values given in
    /// canonical order.
    pub fn with_values<U>(&self, values: Vec<U>) -> Result<NetParams<U>> {
        let expected = self.entries().len();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter entries, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }
}

fn pname(path: PathKind, layer: Option<usize>, role: Role) -> ParamName {
    ParamName { path, layer, role }
}

impl<S: Scalar> NetParams<Tensor<S>> {
    /// Parameters with every entry zero.
    pub fn zeros(config: &EnergyNetConfig) -> Self {
        config.param_shapes().map(|_, s| Tensor::zeros(s))
    }

    /// Checks that every tensor has the shape `config` prescribes.
    pub fn check_shapes(&self, config: &EnergyNetConfig) -> Result<()> {
        let expected = config.param_shapes();
        let (want, have) = (expected.entries(), self.entries());
        if want.len() != have.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} entries, config needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, shape), (other, t)) in want.into_iter().zip(have) {
            if name != other || t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{other} has shape {:?}, expected {name} {:?}", t.shape(), shape),
                ));
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf of `graph`.
    pub fn attach<'g>(&self, graph: &'g Graph<S>) -> NetParams<Var<'g, S>> {
        self.map(|_, t| graph.leaf(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> NetParams<Tensor<T>> {
        self.map(|_, t| t.cast())
    }
}

/// He-style uniform initialization: weights from `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, biases zero. Deterministic in `seed`, and the same
/// draws are used for every precision.
pub fn init_params<S: Scalar>(config: &EnergyNetConfig, seed: u64) -> Result<EnergyNetParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(config.param_shapes().map(|name, shape| {
        if name.role == Role::Bias {
            return Tensor::zeros(shape);
        }
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Tensor::from_fn(shape, |_| S::of(dist.sample(&mut rng)))
    }))
}

/// Input-path activations `u_1..u_L` and the input path's FC output.
#[derive(Clone, Debug)]
pub struct InputFeatures<'g, S: Scalar> {
    pub maps: Vec<Var<'g, S>>,
    pub fc: Var<'g, S>,
}

fn check_image<S: Scalar>(config: &EnergyNetConfig, v: &Var<'_, S>, what: &str) -> Result<()> {
    let shape = v.shape();
    if shape != config.image_shape() {
        return Err(Error::shape(
            "energy",
            format!("{what} has shape {shape:?}, config expects {:?}", config.image_shape()),
        ));
    }
    Ok(())
}

pub fn input_path_forward<'g, S: Scalar>(
    config: &EnergyNetConfig,
    x: Var<'g, S>,
    params: &NetParams<Var<'g, S>>,
) -> Result<InputFeatures<'g, S>> {
    check_image(config, &x, "x")?;
    let mut maps = Vec::with_capacity(config.num_conv_layers);
    let mut u = x;
    for (l, layer) in params.input_conv.iter().enumerate() {
        u = u.conv2d(layer.weight, config.geom(l))?
            .add_channel_bias(layer.bias)?
            .relu()?;
        maps.push(u);
    }
    let fc = u.fully_connected(params.input_fc.weight, params.input_fc.bias)?;
    Ok(InputFeatures { maps, fc })
}

/// Output-path FC output for candidate `y_hat`, given the input-path maps
/// `u_1..u_L` of the paired image.
pub fn output_path_forward<'g, S: Scalar>(
    config: &EnergyNetConfig,
    y_hat: Var<'g, S>,
    maps: &[Var<'g, S>],
    params: &NetParams<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    check_image(config, &y_hat, "y_hat")?;
    if maps.len() != config.num_conv_layers {
        return Err(Error::shape(
            "output_path",
            format!("{} input-path maps for {} layers", maps.len(), config.num_conv_layers),
        ));
    }
    let mut v = y_hat;
    for (l, layer) in params.output_conv.iter().enumerate() {
        let geom = config.geom(l);
        let mut pre = v.conv2d(layer.weight_v, geom)?;
        if let Some(w) = layer.weight_cross {
            pre = pre.add(maps[l - 1].conv2d(w, geom)?)?;
        }
        if let Some(w) = layer.weight_z {
            let z = y_hat.avg_downsample(config.pool_factor(l))?;
            pre = pre.add(z.conv2d(w, geom)?)?;
        }
        v = pre.add_channel_bias(layer.bias)?.relu()?;
    }
    v.fully_connected(params.output_fc.weight, params.output_fc.bias)
}

/// Energy from precomputed input-path features. The input path does not
/// depend on `y_hat`, so inference computes it once per image.
pub fn energy_with_features<'g, S: Scalar>(
    config: &EnergyNetConfig,
    features: &InputFeatures<'g, S>,
    y_hat: Var<'g, S>,
    params: &NetParams<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    let out = output_path_forward(config, y_hat, &features.maps, params)?;
    features.fc.add(out)?.sum_all()
}

pub fn energy<'g, S: Scalar>(
    config: &EnergyNetConfig,
    x: Var<'g, S>,
    y_hat: Var<'g, S>,
    params: &NetParams<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    let features = input_path_forward(config, x, params)?;
    energy_with_features(config, &features, y_hat, params)
}

/// Detached energy value of `(x, y_hat)`.
pub fn energy_value<S: Scalar>(
    config: &EnergyNetConfig,
    x: &Tensor<S>,
    y_hat: &Tensor<S>,
    params: &EnergyNetParams<S>,
) -> Result<S> {
    let g = Graph::new();
    let p = params.attach(&g);
    let e = energy(config, g.leaf(x.clone()), g.leaf(y_hat.clone()), &p)?;
    Ok(e.item().expect("energy is a scalar"))
}

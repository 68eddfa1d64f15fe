//! Independent reference implementations on plain vectors. Nothing here
//! calls the library's kernels or graph.

#![allow(dead_code)]

use dseb_core::energy_net::{EnergyNetConfig, EnergyNetParams};
use dseb_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One `C×H×W` image.
#[derive(Clone, Debug)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Img {
    pub fn from_tensor(t: &Tensor<f64>) -> Img {
        let s = t.shape();
        Img {
            c: s[1],
            h: s[2],
            w: s[3],
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            self.data[(c * self.h + i as usize) * self.w + j as usize]
        }
    }
}

/// Zero-padded cross-correlation. `w` is `O×C×k×k`.
pub fn conv(x: &Img, w: &Tensor<f64>, stride: usize, pad: usize) -> Img {
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(c, x.c);
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let wd = w.data();
    let mut data = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for a in 0..k {
                        for b in 0..k {
                            let xi = (i * stride + a) as isize - pad as isize;
                            let xj = (j * stride + b) as isize - pad as isize;
                            acc += wd[((oc * c + ic) * k + a) * k + b] * x.at(ic, xi, xj);
                        }
                    }
                }
                data[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    Img { c: o, h: oh, w: ow, data }
}

pub fn add(a: &Img, b: &Img) -> Img {
    Img {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

pub fn bias_relu(x: &Img, bias: &[f64]) -> Img {
    let plane = x.h * x.w;
    Img {
        data: x
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v + bias[i / plane]).max(0.0))
            .collect(),
        ..x.clone()
    }
}

pub fn pool(x: &Img, f: usize) -> Img {
    let (h, w) = (x.h / f, x.w / f);
    let mut data = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for a in 0..f {
                    for b in 0..f {
                        s += x.at(c, (i * f + a) as isize, (j * f + b) as isize);
                    }
                }
                data[(c * h + i) * w + j] = s / (f * f) as f64;
            }
        }
    }
    Img { c: x.c, h, w, data }
}

pub fn dense(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| b.data()[r] + (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

fn stride(config: &EnergyNetConfig, l: usize) -> usize {
    if config.stride.len() == 1 {
        config.stride[0]
    } else {
        config.stride[l]
    }
}

/// Input-path maps `u_1..u_L` and FC output.
pub fn input_path(config: &EnergyNetConfig, x: &Tensor<f64>, p: &EnergyNetParams<f64>) -> (Vec<Img>, Vec<f64>) {
    let pad = config.kernel / 2;
    let mut u = Img::from_tensor(x);
    let mut maps = Vec::new();
    for (l, layer) in p.input_conv.iter().enumerate() {
        u = bias_relu(&conv(&u, &layer.weight, stride(config, l), pad), layer.bias.data());
        maps.push(u.clone());
    }
    let fc = dense(&p.input_fc.weight, &p.input_fc.bias, &u.data);
    (maps, fc)
}

pub fn output_path(config: &EnergyNetConfig, y_hat: &Tensor<f64>, maps: &[Img], p: &EnergyNetParams<f64>) -> Vec<f64> {
    let pad = config.kernel / 2;
    let y = Img::from_tensor(y_hat);
    let mut v = y.clone();
    for (l, layer) in p.output_conv.iter().enumerate() {
        let s = stride(config, l);
        let mut pre = conv(&v, &layer.weight_v, s, pad);
        if l > 0 {
            pre = add(&pre, &conv(&maps[l - 1], layer.weight_cross.as_ref().unwrap(), s, pad));
            let z = pool(&y, y.h / v.h);
            pre = add(&pre, &conv(&z, layer.weight_z.as_ref().unwrap(), s, pad));
        }
        v = bias_relu(&pre, layer.bias.data());
    }
    dense(&p.output_fc.weight, &p.output_fc.bias, &v.data)
}

pub fn energy(config: &EnergyNetConfig, x: &Tensor<f64>, y_hat: &Tensor<f64>, p: &EnergyNetParams<f64>) -> f64 {
    let (maps, fc_i) = input_path(config, x, p);
    let fc_o = output_path(config, y_hat, &maps, p);
    fc_i.iter().zip(&fc_o).map(|(a, b)| a + b).sum()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn random_params(config: &EnergyNetConfig, rng: &mut ChaCha8Rng) -> EnergyNetParams<f64> {
    EnergyNetParams::<f64>::zeros(config).map(|_, t| random(rng, t.shape(), -0.5, 0.5))
}

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

/// `|a - b| <= tol · max(1, |b|)` elementwise.
pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * y.abs().max(1.0), "entry {i}: {x} vs {y}");
    }
}

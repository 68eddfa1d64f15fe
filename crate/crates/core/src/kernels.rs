//! Raw numeric kernels on dense tensors. No graph bookkeeping here.
//!
//! Convolution is cross-correlation with zero padding. The three convolution
//! kernels form a closed family under differentiation:
//! `conv2d(x, w)`, its input adjoint `conv2d_input_grad(g, w)` and its weight
//! adjoint `conv2d_weight_grad(x, g)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        Ok(ConvGeom { stride, padding })
    }

    pub fn out_len(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} larger than padded extent {padded}"),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output positions `o` in `[lo, hi)` whose tap `k` lands inside the
    /// unpadded input, i.e. `0 <= o*stride + k - padding < input`.
    #[inline]
    fn valid(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if input + p > k {
            ((input + p - k - 1) / s + 1).min(output)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, geom: ConvGeom) -> Result<Tensor<S>> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if c != wc {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    let oh = geom.out_len(h, kh)?;
    let ow = geom.out_len(wd, kw)?;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![S::zero(); n * o * oh * ow];
    let s = geom.stride;
    for b in 0..n {
        for oc in 0..o {
            let dst = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let src = &xs[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                for ki in 0..kh {
                    let (r0, r1) = geom.valid(ki, h, oh);
                    for kj in 0..kw {
                        let wv = ws[((oc * c + ic) * kh + ki) * kw + kj];
                        if wv == S::zero() {
                            continue;
                        }
                        let (c0, c1) = geom.valid(kj, wd, ow);
                        for r in r0..r1 {
                            let ir = r * s + ki - geom.padding;
                            let row = &src[ir * wd..(ir + 1) * wd];
                            let drow = &mut dst[r * ow..(r + 1) * ow];
                            for col in c0..c1 {
                                drow[col] += wv * row[col * s + kj - geom.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, oh, ow], out))
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped gradient back to
/// an input of spatial size `input_hw`.
pub fn conv2d_input_grad<S: Scalar>(
    g: &Tensor<S>,
    w: &Tensor<S>,
    geom: ConvGeom,
    input_hw: (usize, usize),
) -> Result<Tensor<S>> {
    let (n, o, oh, ow) = g.dims4()?;
    let (wo, c, kh, kw) = w.dims4()?;
    let (h, wd) = input_hw;
    if o != wo || geom.out_len(h, kh)? != oh || geom.out_len(wd, kw)? != ow {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("gradient {:?} inconsistent with weight {:?}", g.shape(), w.shape()),
        ));
    }
    let (gs, ws) = (g.data(), w.data());
    let mut out = vec![S::zero(); n * c * h * wd];
    let s = geom.stride;
    for b in 0..n {
        for oc in 0..o {
            let src = &gs[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let dst = &mut out[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                for ki in 0..kh {
                    let (r0, r1) = geom.valid(ki, h, oh);
                    for kj in 0..kw {
                        let wv = ws[((oc * c + ic) * kh + ki) * kw + kj];
                        if wv == S::zero() {
                            continue;
                        }
                        let (c0, c1) = geom.valid(kj, wd, ow);
                        for r in r0..r1 {
                            let ir = r * s + ki - geom.padding;
                            let grow = &src[r * ow..(r + 1) * ow];
                            let drow = &mut dst[ir * wd..(ir + 1) * wd];
                            for col in c0..c1 {
                                drow[col * s + kj - geom.padding] += wv * grow[col];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, wd], out))
}

/// Adjoint of [`conv2d`] in its weight: correlates the input with an
/// output-shaped gradient, giving a `O×C×kh×kw` tensor.
pub fn conv2d_weight_grad<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    geom: ConvGeom,
    kernel_hw: (usize, usize),
) -> Result<Tensor<S>> {
    let (n, c, h, wd) = x.dims4()?;
    let (gn, o, oh, ow) = g.dims4()?;
    let (kh, kw) = kernel_hw;
    if gn != n || geom.out_len(h, kh)? != oh || geom.out_len(wd, kw)? != ow {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("input {:?} inconsistent with gradient {:?}", x.shape(), g.shape()),
        ));
    }
    let (xs, gs) = (x.data(), g.data());
    let mut out = vec![S::zero(); o * c * kh * kw];
    let s = geom.stride;
    for b in 0..n {
        for oc in 0..o {
            let gsrc = &gs[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let xsrc = &xs[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                for ki in 0..kh {
                    let (r0, r1) = geom.valid(ki, h, oh);
                    for kj in 0..kw {
                        let (c0, c1) = geom.valid(kj, wd, ow);
                        let mut acc = S::zero();
                        for r in r0..r1 {
                            let ir = r * s + ki - geom.padding;
                            let xrow = &xsrc[ir * wd..(ir + 1) * wd];
                            let grow = &gsrc[r * ow..(r + 1) * ow];
                            for col in c0..c1 {
                                acc += grow[col] * xrow[col * s + kj - geom.padding];
                            }
                        }
                        out[((oc * c + ic) * kh + ki) * kw + kj] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![o, c, kh, kw], out))
}

/// Means over non-overlapping `factor×factor` windows of an `N×C×H×W` tensor.
pub fn avg_downsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_downsample",
            format!("factor {factor} does not divide {h}×{w}"),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = S::one() / S::of((factor * factor) as f64);
    let xs = x.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                dst[(i / factor) * ow + j / factor] += src[i * w + j];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Adjoint of [`avg_downsample`]: each coarse value, divided by `factor²`,
/// is copied into its window.
pub fn upsample_spread<S: Scalar>(g: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (n, c, oh, ow) = g.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    if factor == 1 {
        return Ok(g.clone());
    }
    let (h, w) = (oh * factor, ow * factor);
    let inv = S::one() / S::of((factor * factor) as f64);
    let gs = g.data();
    let mut out = vec![S::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &gs[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / factor) * ow + j / factor] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

fn matrix_dims<S: Scalar>(w: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match w.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// `W · x` for `W: R×D` and `x` of `D` elements (any shape).
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = matrix_dims(w, "matvec")?;
    if x.numel() != cols {
        return Err(Error::shape(
            "matvec",
            format!("matrix {rows}×{cols} against vector of {}", x.numel()),
        ));
    }
    let (ws, xs) = (w.data(), x.data());
    let out = (0..rows)
        .map(|r| {
            ws[r * cols..(r + 1) * cols]
                .iter()
                .zip(xs)
                .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect();
    Ok(Tensor::from_parts(vec![rows], out))
}

/// `Wᵀ · g` for `W: R×D` and `g` of `R` elements; result has `D` elements.
pub fn matvec_t<S: Scalar>(w: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = matrix_dims(w, "matvec_t")?;
    if g.numel() != rows {
        return Err(Error::shape(
            "matvec_t",
            format!("matrix {rows}×{cols} transposed against vector of {}", g.numel()),
        ));
    }
    let (ws, gs) = (w.data(), g.data());
    let mut out = vec![S::zero(); cols];
    for r in 0..rows {
        let gv = gs[r];
        for (o, &wv) in out.iter_mut().zip(&ws[r * cols..(r + 1) * cols]) {
            *o += wv * gv;
        }
    }
    Ok(Tensor::from_parts(vec![cols], out))
}

/// `a bᵀ` as an `len(a)×len(b)` matrix.
pub fn outer<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(ad.len() * bd.len());
    for &av in ad {
        out.extend(bd.iter().map(|&bv| av * bv));
    }
    Tensor::from_parts(vec![ad.len(), bd.len()], out)
}

/// Sums an `N×C×H×W` tensor down to its `C` channels.
pub fn channel_sum<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let xs = x.data();
    let mut out = vec![S::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * h * w;
            *o += xs[start..start + h * w].iter().copied().sum::<S>();
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// Repeats a per-channel vector over an `N×C×H×W` shape.
pub fn broadcast_channel<S: Scalar>(b: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
    let (n, c, h, w) = match shape {
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => return Err(Error::shape("broadcast_channel", format!("target {shape:?}"))),
    };
    if b.numel() != c {
        return Err(Error::shape(
            "broadcast_channel",
            format!("{} biases for {c} channels", b.numel()),
        ));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for &bv in b.data() {
            out.extend(std::iter::repeat(bv).take(h * w));
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

//! Dense f64 tensors and the kernels the toy models are built from.
//!
//! Every reduction has a fixed accumulation order so results are a pure
//! function of the inputs. The orders are part of the contract:
//!
//! * `conv2d`: a compensated sum (see [`Sum2`]) of the rounded products
//!   `w * x` over input channel, then kernel row, then kernel column
//!   (out-of-bounds taps contribute nothing); the bias is added last.
//! * `matmul`: compensated sum over the shared index ascending.
//! * `group_stats`: compensated sums in row-major order.
//! * pooling sums plainly in row-major order.
//!
//! Compensation makes a dot product almost independent of term order, so
//! permuting channels (which permutes summands) leaves outputs bitwise
//! unchanged except in vanishingly rare rounding ties. It is also exact
//! under negation and power-of-two scaling of all terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor added before the square root in group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Running sum with a TwoSum error term: `s + c` tracks the exact sum of the
/// added values to within `O(n^2 u^2)` of their magnitudes.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sum2 {
    pub s: f64,
    pub c: f64,
}

impl Sum2 {
    #[inline(always)]
    pub fn add(&mut self, x: f64) {
        let t = self.s + x;
        let z = t - self.s;
        self.c += (self.s - (t - z)) + (x - z);
        self.s = t;
    }

    #[inline(always)]
    pub fn value(self) -> f64 {
        self.s + self.c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                dim: "element count",
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Equality of every element's bit pattern (so `-0.0 != 0.0`, NaN == NaN).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elements per leading-axis slice.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// `f(λx) = λ f(x)` for every `λ > 0`.
    pub fn is_positively_homogeneous(self) -> bool {
        !matches!(self, Activation::Tanh)
    }

    /// `f(-x) = -f(x)`.
    pub fn is_odd(self) -> bool {
        matches!(self, Activation::Identity | Activation::Tanh)
    }
}

pub fn activate(x: &Tensor, act: Activation) -> Tensor {
    x.map(|v| act.apply(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize, op: &'static str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidShape {
            op,
            msg: "stride must be positive".into(),
        });
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::InvalidShape {
            op,
            msg: format!("kernel {kernel} does not fit padded extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op,
            dim: "rank",
            expected: rank,
            actual: t.rank(),
        });
    }
    Ok(())
}

/// 2-D convolution. `input` is `[C_in, H, W]`, `weights` is
/// `[C_in, C_out, k1, k2]`, `bias` is `[C_out]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    expect_rank(input, 3, "conv2d")?;
    expect_rank(weights, 4, "conv2d")?;
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (wcin, cout, k1, k2) = (weights.dim(0), weights.dim(1), weights.dim(2), weights.dim(3));
    if wcin != cin {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "input channels",
            expected: wcin,
            actual: cin,
        });
    }
    if bias.len() != cout {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "bias length",
            expected: cout,
            actual: bias.len(),
        });
    }
    let ho = out_extent(h, k1, stride, padding, "conv2d")?;
    let wo = out_extent(w, k2, stride, padding, "conv2d")?;
    let x = input.data();
    let wt = weights.data();
    // Valid output columns for each kernel column: ix = ox*stride + kx - padding in [0, w).
    let col_range = |kx: usize| {
        let lo = padding.saturating_sub(kx).div_ceil(stride);
        let hi = ((w + padding).saturating_sub(kx)).div_ceil(stride).min(wo);
        (lo, hi.max(lo))
    };
    let mut out = vec![0.0; cout * ho * wo];
    let mut comp = vec![0.0; ho * wo];
    for o in 0..cout {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        comp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..cin {
            let xin = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k1 {
                for kx in 0..k2 {
                    let wv = wt[((i * cout + o) * k1 + ky) * k2 + kx];
                    let (lo, hi) = col_range(kx);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &mut plane[oy * wo + lo..oy * wo + hi];
                        let crow = &mut comp[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * stride + kx - padding;
                        if stride == 1 {
                            let xs = &row[ix0..ix0 + (hi - lo)];
                            for ((s, c), &xv) in srow.iter_mut().zip(crow.iter_mut()).zip(xs) {
                                let p = wv * xv;
                                let t = *s + p;
                                let z = t - *s;
                                *c += (*s - (t - z)) + (p - z);
                                *s = t;
                            }
                        } else {
                            for (j, (s, c)) in srow.iter_mut().zip(crow.iter_mut()).enumerate() {
                                let p = wv * row[ix0 + j * stride];
                                let t = *s + p;
                                let z = t - *s;
                                *c += (*s - (t - z)) + (p - z);
                                *s = t;
                            }
                        }
                    }
                }
            }
        }
        let b = bias.data()[o];
        for (v, c) in plane.iter_mut().zip(&comp) {
            *v = (*v + c) + b;
        }
    }
    Tensor::new(vec![cout, ho, wo], out)
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (kb, n) = (b.dim(0), b.dim(1));
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            dim: "inner dimension",
            expected: k,
            actual: kb,
        });
    }
    let mut out = vec![0.0; m * n];
    let mut acc = vec![Sum2::default(); n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = Sum2::default());
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(brow) {
                acc.add(av * bv);
            }
        }
        for (o, a) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = a.value();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-channel `gamma * (x - mean) / std + beta`, channel on axis 0.
pub fn affine_norm(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = x.shape().first().copied().unwrap_or(0);
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("std", std)] {
        if v.len() != c {
            return Err(Error::InvalidShape {
                op: "affine_norm",
                msg: format!("{name} has length {} for {c} channels", v.len()),
            });
        }
    }
    if let Some((ch, &s)) = std.iter().enumerate().find(|(_, &s)| s.is_nan() || s <= 0.0) {
        return Err(Error::NonPositiveStd { channel: ch, value: s });
    }
    let inner = x.inner_len();
    let mut out = x.clone();
    for ch in 0..c {
        let (g, b, m, s) = (gamma[ch], beta[ch], mean[ch], std[ch]);
        for v in &mut out.data_mut()[ch * inner..(ch + 1) * inner] {
            *v = g * (*v - m) / s + b;
        }
    }
    Ok(out)
}

/// Mean and `sqrt(var + GROUP_NORM_EPS)` of each contiguous channel group.
/// Population variance, two passes, compensated sums.
pub fn group_stats(x: &Tensor, groups: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = x.shape().first().copied().unwrap_or(0);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Divisibility { channels: c, groups });
    }
    let span = (c / groups) * x.inner_len();
    let mut means = Vec::with_capacity(groups);
    let mut stds = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = &x.data()[g * span..(g + 1) * span];
        let mut sum = Sum2::default();
        for &v in s {
            sum.add(v);
        }
        let mu = sum.value() / span as f64;
        let mut sq = Sum2::default();
        for v in s {
            let d = v - mu;
            sq.add(d * d);
        }
        means.push(mu);
        stds.push((sq.value() / span as f64 + GROUP_NORM_EPS).sqrt());
    }
    Ok((means, stds))
}

/// Group normalization with per-channel affine, expressed through
/// [`affine_norm`] with group statistics broadcast to channels.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (means, stds) = group_stats(x, groups)?;
    let c = x.dim(0);
    let per = c / groups;
    let mean: Vec<f64> = (0..c).map(|ch| means[ch / per]).collect();
    let std: Vec<f64> = (0..c).map(|ch| stds[ch / per]).collect();
    affine_norm(x, gamma, beta, &mean, &std)
}

/// Pooling over `[C, H, W]` without padding.
pub fn pool(x: &Tensor, spec: PoolSpec) -> Result<Tensor> {
    expect_rank(x, 3, "pool")?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let ho = out_extent(h, spec.window, spec.stride, 0, "pool")?;
    let wo = out_extent(w, spec.window, spec.stride, 0, "pool")?;
    let k = spec.window;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let p = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                let v = match spec.kind {
                    PoolKind::Max => {
                        let mut best = p[y0 * w + x0];
                        for dy in 0..k {
                            for dx in 0..k {
                                let v = p[(y0 + dy) * w + x0 + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += p[(y0 + dy) * w + x0 + dx];
                            }
                        }
                        s / (k * k) as f64
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// `[C, H, W] -> [C, 1, 1]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "global_avg_pool")?;
    let c = x.dim(0);
    let n = x.inner_len();
    let data = (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for v in &x.data()[ch * n..(ch + 1) * n] {
                s += v;
            }
            s / n as f64
        })
        .collect();
    Tensor::new(vec![c, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64).sin());
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 5, 5]);
        for o in 0..3 {
            assert!(y.data()[o * 25..(o + 1) * 25].iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 1, 1]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "input channels", .. }));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn affine_norm_rejects_zero_std() {
        let x = Tensor::zeros(&[1, 2]);
        let err = affine_norm(&x, &[1.0], &[0.0], &[0.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveStd { channel: 0, .. }));
    }

    #[test]
    fn group_stats_divisibility() {
        let x = Tensor::zeros(&[6, 2]);
        assert!(matches!(group_stats(&x, 4), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 4.0, -2.0, 3.0]).unwrap();
        let y = pool(&x, PoolSpec { kind: PoolKind::Max, window: 2, stride: 2 }).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn activation_classes() {
        assert!(Activation::Relu.is_positively_homogeneous());
        assert!(!Activation::Tanh.is_positively_homogeneous());
        assert!(Activation::Tanh.is_odd());
        assert!(!Activation::Relu.is_odd());
        assert_eq!(Activation::LeakyRelu { slope: 0.1 }.apply(-2.0), -0.2);
    }
}

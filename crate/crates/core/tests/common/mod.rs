//! Naive-loop oracles shared by the kernel tests and the acceptance run.
#![allow(dead_code)]

use neuroscrub::rng::Prng;
use neuroscrub::tensor::{PoolKind, Tensor, GROUP_NORM_EPS};

/// Compensated accumulator written out longhand: the documented kernel
/// contract is "TwoSum every term in order, return s + c".
#[derive(Default)]
struct Acc {
    s: f64,
    c: f64,
}

impl Acc {
    fn push(&mut self, x: f64) {
        let t = self.s + x;
        let z = t - self.s;
        self.c += (self.s - (t - z)) + (x - z);
        self.s = t;
    }
}

pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, k1, k2) = (w.dim(1), w.dim(2), w.dim(3));
    let ho = (h + 2 * pad - k1) / stride + 1;
    let wo = (wd + 2 * pad - k2) / stride + 1;
    let mut out = Vec::new();
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = Acc::default();
                for i in 0..cin {
                    for ky in 0..k1 {
                        for kx in 0..k2 {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            let xv = x.data()[(i * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((i * cout + o) * k1 + ky) * k2 + kx];
                            acc.push(wv * xv);
                        }
                    }
                }
                out.push((acc.s + acc.c) + b.data()[o]);
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let mut acc = Acc::default();
            for q in 0..k {
                acc.push(a.data()[i * k + q] * b.data()[q * n + j]);
            }
            out.push(acc.s + acc.c);
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn naive_pool(x: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |dy: usize, dx: usize| x.data()[(ch * h + oy * stride + dy) * w + ox * stride + dx];
                out.push(match kind {
                    PoolKind::Max => {
                        let mut best = at(0, 0);
                        for dy in 0..k {
                            for dx in 0..k {
                                if at(dy, dx) > best {
                                    best = at(dy, dx);
                                }
                            }
                        }
                        best
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += at(dy, dx);
                            }
                        }
                        s / (k * k) as f64
                    }
                });
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out).unwrap()
}

pub fn naive_group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Tensor {
    let c = x.dim(0);
    let inner = x.len() / c;
    let per = c / groups;
    let mut out = x.data().to_vec();
    for g in 0..groups {
        let vals = &x.data()[g * per * inner..(g + 1) * per * inner];
        let mut acc = Acc::default();
        for &v in vals {
            acc.push(v);
        }
        let mu = (acc.s + acc.c) / vals.len() as f64;
        let mut sq = Acc::default();
        for &v in vals {
            sq.push((v - mu) * (v - mu));
        }
        let sigma = ((sq.s + sq.c) / vals.len() as f64 + GROUP_NORM_EPS).sqrt();
        for ch in g * per..(g + 1) * per {
            for v in &mut out[ch * inner..(ch + 1) * inner] {
                *v = gamma[ch] * (*v - mu) / sigma + beta[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn gaussian(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

pub fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}


pub fn naive_affine_norm(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], std: &[f64]) -> Tensor {
    let inner = x.len() / x.dim(0);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / inner;
            gamma[ch] * (v - mean[ch]) / std[ch] + beta[ch]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

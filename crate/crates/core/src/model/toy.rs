//! Small seeded architectures covering each topology feature.
//!
//! All convolutional toys take `3x16x16` inputs, end in global average
//! pooling, a 1x1 "linear" block and a 10-class head. Weights are uniform in
//! `+-1/sqrt(fan_in)`, norm scales carry a random sign, batch-norm statistics
//! are calibrated on a fixed synthetic batch, and the head is standardized so
//! each class logit has zero mean and unit variance on that batch (classes are
//! then predicted at comparable rates).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::equiv::sample_inputs;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{self, Activation, PoolKind, PoolSpec, Tensor};

use super::{ConvBlock, Inception, Model, Node, Norm, Residual, RnnCell};

pub const NUM_CLASSES: usize = 10;
const CALIBRATION_SEED: u64 = 0x5EED_CA1B;
const CALIBRATION_BATCH: usize = 32;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PlainCnn,
    ResnetMini,
    InceptionMini,
    GroupnormCnn,
    TanhRnn,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::PlainCnn,
        Arch::ResnetMini,
        Arch::InceptionMini,
        Arch::GroupnormCnn,
        Arch::TanhRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::PlainCnn => "plain_cnn",
            Arch::ResnetMini => "resnet_mini",
            Arch::InceptionMini => "inception_mini",
            Arch::GroupnormCnn => "groupnorm_cnn",
            Arch::TanhRnn => "tanh_rnn",
        }
    }

    pub fn default_widths(self) -> &'static [usize] {
        match self {
            Arch::PlainCnn | Arch::GroupnormCnn => &[16, 32, 64, 64, 192],
            Arch::ResnetMini => &[16, 32, 64, 192],
            Arch::InceptionMini => &[16, 16, 16, 24, 16, 24, 64, 192],
            Arch::TanhRnn => &[16, 192],
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy)]
enum NormKind {
    Batch,
    Group,
}

struct Init {
    rng: Prng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], r: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.uniform_in(-r, r))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: NormKind,
        act: Activation,
        pool: Option<PoolSpec>,
    ) -> Result<ConvBlock> {
        let r = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = self.uniform(&[cin, cout, k, k], r);
        let bias = self.uniform(&[cout], r);
        let gamma: Vec<f64> = (0..cout).map(|_| self.rng.sign() * self.rng.uniform_in(0.5, 1.5)).collect();
        let beta: Vec<f64> = (0..cout).map(|_| self.rng.uniform_in(-0.1, 0.1)).collect();
        let norm = match norm {
            NormKind::Batch => Norm::Batch {
                gamma,
                beta,
                mean: vec![0.0; cout],
                std: vec![1.0; cout],
            },
            NormKind::Group => {
                if !cout.is_multiple_of(4) {
                    return Err(Error::Divisibility {
                        channels: cout,
                        groups: cout / 4,
                    });
                }
                Norm::Group {
                    gamma,
                    beta,
                    groups: cout / 4,
                }
            }
        };
        Ok(ConvBlock {
            weight,
            bias,
            norm,
            act,
            pool,
            stride,
            padding: k / 2,
            mask: None,
        })
    }

    fn head(&mut self, cin: usize) -> ConvBlock {
        let r = 1.0 / (cin as f64).sqrt();
        ConvBlock {
            weight: self.uniform(&[cin, NUM_CLASSES, 1, 1], r),
            bias: Tensor::zeros(&[NUM_CLASSES]),
            norm: Norm::None,
            act: Activation::Identity,
            pool: None,
            stride: 1,
            padding: 0,
            mask: None,
        }
    }
}

const MAX2: Option<PoolSpec> = Some(PoolSpec {
    kind: PoolKind::Max,
    window: 2,
    stride: 2,
});

fn need(arch: Arch, widths: &[usize], n: usize) -> Result<()> {
    if widths.len() != n || widths.contains(&0) {
        return Err(Error::Topology(format!(
            "{arch} takes {n} positive widths, got {widths:?}"
        )));
    }
    Ok(())
}

/// Builds a toy model. `widths` overrides [`Arch::default_widths`].
pub fn gen_toy_model(arch: Arch, widths: Option<&[usize]>, seed: u64) -> Result<Model> {
    let w = widths.unwrap_or(arch.default_widths());
    let mut init = Init { rng: Prng::new(seed) };
    let relu = Activation::Relu;
    let mut model = match arch {
        Arch::PlainCnn | Arch::GroupnormCnn => {
            need(arch, w, 5)?;
            let nk = if arch == Arch::PlainCnn { NormKind::Batch } else { NormKind::Group };
            let nodes = vec![
                Node::Block(init.conv(3, w[0], 3, 1, nk, relu, None)?),
                Node::Block(init.conv(w[0], w[1], 3, 1, nk, relu, MAX2)?),
                Node::Block(init.conv(w[1], w[2], 3, 1, nk, relu, MAX2)?),
                Node::Block(init.conv(w[2], w[3], 3, 1, nk, relu, None)?),
                Node::GlobalPool,
                Node::Block(init.conv(w[3], w[4], 1, 1, nk, relu, None)?),
            ];
            Model {
                arch: arch.name().into(),
                input_shape: vec![3, 16, 16],
                nodes,
                head: init.head(w[4]),
            }
        }
        Arch::ResnetMini => {
            need(arch, w, 4)?;
            let bn = NormKind::Batch;
            let id = Activation::Identity;
            let mut nodes = vec![Node::Block(init.conv(3, w[0], 3, 1, bn, relu, None)?)];
            nodes.push(Node::Residual(Residual {
                body: vec![
                    init.conv(w[0], w[0], 3, 1, bn, relu, None)?,
                    init.conv(w[0], w[0], 3, 1, bn, id, None)?,
                ],
                shortcut: None,
                post_act: relu,
            }));
            for (cin, cout) in [(w[0], w[1]), (w[1], w[2])] {
                nodes.push(Node::Residual(Residual {
                    body: vec![
                        init.conv(cin, cout, 3, 2, bn, relu, None)?,
                        init.conv(cout, cout, 3, 1, bn, id, None)?,
                    ],
                    shortcut: Some(init.conv(cin, cout, 1, 2, bn, id, None)?),
                    post_act: relu,
                }));
            }
            nodes.push(Node::GlobalPool);
            nodes.push(Node::Block(init.conv(w[2], w[3], 1, 1, bn, relu, None)?));
            Model {
                arch: arch.name().into(),
                input_shape: vec![3, 16, 16],
                nodes,
                head: init.head(w[3]),
            }
        }
        Arch::InceptionMini => {
            need(arch, w, 8)?;
            let bn = NormKind::Batch;
            let cat = w[1] + w[3] + w[5];
            let nodes = vec![
                Node::Block(init.conv(3, w[0], 3, 1, bn, relu, MAX2)?),
                Node::Inception(Inception {
                    branches: vec![
                        vec![init.conv(w[0], w[1], 1, 1, bn, relu, None)?],
                        vec![
                            init.conv(w[0], w[2], 1, 1, bn, relu, None)?,
                            init.conv(w[2], w[3], 3, 1, bn, relu, None)?,
                        ],
                        vec![
                            init.conv(w[0], w[4], 3, 1, bn, relu, None)?,
                            init.conv(w[4], w[5], 3, 1, bn, relu, None)?,
                        ],
                    ],
                }),
                Node::Block(init.conv(cat, w[6], 3, 1, bn, relu, MAX2)?),
                Node::GlobalPool,
                Node::Block(init.conv(w[6], w[7], 1, 1, bn, relu, None)?),
            ];
            Model {
                arch: arch.name().into(),
                input_shape: vec![3, 16, 16],
                nodes,
                head: init.head(w[7]),
            }
        }
        Arch::TanhRnn => {
            need(arch, w, 2)?;
            let (d, n) = (w[0], w[1]);
            let cell = RnnCell {
                w_ih: init.uniform(&[d, n], 1.0 / (d as f64).sqrt()),
                w_hh: init.uniform(&[n, n], 1.0 / (n as f64).sqrt()),
                bias: init.uniform(&[n], 1.0 / (n as f64).sqrt()),
            };
            Model {
                arch: arch.name().into(),
                input_shape: vec![8, d],
                nodes: vec![Node::Rnn(cell)],
                head: init.head(n),
            }
        }
    };
    calibrate(&mut model)?;
    Ok(model)
}

/// Sets batch-norm statistics from the calibration batch in one pass through
/// the network (each block sees inputs normalized with the statistics already
/// set upstream), then standardizes the head.
fn calibrate(model: &mut Model) -> Result<()> {
    let batch = sample_inputs(CALIBRATION_SEED, CALIBRATION_BATCH, &model.input_shape);
    let mut xs = batch.clone();
    for node in &mut model.nodes {
        xs = match node {
            Node::Block(b) => calibrate_conv(b, &xs)?,
            Node::Residual(r) => {
                let mut h = xs.clone();
                for b in &mut r.body {
                    h = calibrate_conv(b, &h)?;
                }
                let s = match &mut r.shortcut {
                    Some(b) => calibrate_conv(b, &xs)?,
                    None => xs,
                };
                h.iter()
                    .zip(&s)
                    .map(|(a, b)| {
                        let sum = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                        Ok(tensor::activate(&Tensor::new(a.shape().to_vec(), sum)?, r.post_act))
                    })
                    .collect::<Result<_>>()?
            }
            Node::Inception(inc) => {
                let mut outs: Vec<Vec<f64>> = vec![Vec::new(); xs.len()];
                let mut c = 0;
                let mut spatial = Vec::new();
                for br in &mut inc.branches {
                    let mut h = xs.clone();
                    for b in br.iter_mut() {
                        h = calibrate_conv(b, &h)?;
                    }
                    c += h[0].dim(0);
                    spatial = h[0].shape()[1..].to_vec();
                    for (o, t) in outs.iter_mut().zip(h) {
                        o.extend(t.into_data());
                    }
                }
                let mut shape = vec![c];
                shape.extend(spatial);
                outs.into_iter().map(|d| Tensor::new(shape.clone(), d)).collect::<Result<_>>()?
            }
            Node::GlobalPool => xs.iter().map(tensor::global_avg_pool).collect::<Result<_>>()?,
            // Recurrent cells carry no statistics.
            Node::Rnn(_) => break,
        };
    }

    let logits: Vec<Tensor> = if matches!(model.nodes.last(), Some(Node::Rnn(_))) {
        batch.iter().map(|x| model.forward(x)).collect::<Result<_>>()?
    } else {
        let head = &model.head;
        xs.iter()
            .map(|x| tensor::conv2d(x, &head.weight, &head.bias, 1, 0))
            .collect::<Result<_>>()?
    };
    rescale_head(model, &logits);
    Ok(())
}

/// Re-standardizes the head on the calibration batch so every class logit
/// has zero mean and unit variance there. Used after edits that move the
/// features the head sees (passport embedding replaces the norm affine).
pub(crate) fn standardize_head(model: &mut Model) -> Result<()> {
    let batch = sample_inputs(CALIBRATION_SEED, CALIBRATION_BATCH, &model.input_shape);
    let logits: Vec<Tensor> = batch.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    rescale_head(model, &logits);
    Ok(())
}

fn rescale_head(model: &mut Model, logits: &[Tensor]) {
    let k = model.num_classes();
    let n = logits.len() as f64;
    let cin = model.head.in_channels();
    for class in 0..k {
        let mean = logits.iter().map(|l| l.data()[class]).sum::<f64>() / n;
        let var = logits.iter().map(|l| (l.data()[class] - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / var.sqrt().max(1e-12);
        model.head.bias.data_mut()[class] = (model.head.bias.data()[class] - mean) * scale;
        for r in 0..cin {
            model.head.weight.data_mut()[r * k + class] *= scale;
        }
    }
}

/// Runs `b` on the batch, setting its batch-norm statistics from the
/// pre-normalization responses first.
fn calibrate_conv(b: &mut ConvBlock, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    let w = b.effective_weight().into_owned();
    let lin: Vec<Tensor> = xs
        .iter()
        .map(|x| tensor::conv2d(x, &w, &b.bias, b.stride, b.padding))
        .collect::<Result<_>>()?;
    if let Norm::Batch { mean, std, .. } = &mut b.norm {
        let c = mean.len();
        let inner = lin[0].inner_len();
        let count = (inner * lin.len()) as f64;
        for ch in 0..c {
            let chan = || lin.iter().flat_map(|t| &t.data()[ch * inner..(ch + 1) * inner]);
            let m = chan().sum::<f64>() / count;
            let var = chan().map(|v| (v - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = (var + BN_EPS).sqrt();
        }
    }
    lin.iter()
        .map(|l| {
            let normed = match &b.norm {
                Norm::None => l.clone(),
                Norm::Batch { gamma, beta, mean, std } => tensor::affine_norm(l, gamma, beta, mean, std)?,
                Norm::Group { gamma, beta, groups } => tensor::group_norm(l, *groups, gamma, beta)?,
            };
            let a = tensor::activate(&normed, b.act);
            match b.pool {
                Some(spec) => tensor::pool(&a, spec),
                None => Ok(a),
            }
        })
        .collect()
}

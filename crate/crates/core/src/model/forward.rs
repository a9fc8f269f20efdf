use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Sum2, Tensor};

use super::{BlockId, ConvBlock, Model, Node, Norm, RnnCell};

/// Replacement `(gamma, beta)` per block, used by private passport branches.
pub type NormOverrides = BTreeMap<BlockId, (Vec<f64>, Vec<f64>)>;

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub capture: &'a [BlockId],
    pub norm_overrides: Option<&'a NormOverrides>,
}

/// Intermediate values of one block for one input.
#[derive(Clone, Debug)]
pub struct BlockCapture {
    /// Convolution (or recurrent pre-activation) output before normalization.
    pub linear: Tensor,
    /// After normalization and activation, before pooling.
    pub activated: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub captures: BTreeMap<BlockId, BlockCapture>,
}

struct Walker<'a> {
    opts: &'a ForwardOptions<'a>,
    next: usize,
    captures: BTreeMap<BlockId, BlockCapture>,
}

impl Walker<'_> {
    fn take_id(&mut self) -> BlockId {
        let id = BlockId(self.next);
        self.next += 1;
        id
    }

    fn conv(&mut self, b: &ConvBlock, x: &Tensor) -> Result<Tensor> {
        let id = self.take_id();
        let w = b.effective_weight();
        let linear = tensor::conv2d(x, &w, &b.bias, b.stride, b.padding)?;
        let ov = self.opts.norm_overrides.and_then(|m| m.get(&id));
        let normed = match &b.norm {
            Norm::None => None,
            Norm::Batch { gamma, beta, mean, std } => {
                let (g, be) = ov.map_or((gamma, beta), |(g, be)| (g, be));
                Some(tensor::affine_norm(&linear, g, be, mean, std)?)
            }
            Norm::Group { gamma, beta, groups } => {
                let (g, be) = ov.map_or((gamma, beta), |(g, be)| (g, be));
                Some(tensor::group_norm(&linear, *groups, g, be)?)
            }
        };
        let activated = tensor::activate(normed.as_ref().unwrap_or(&linear), b.act);
        let output = match b.pool {
            Some(spec) => tensor::pool(&activated, spec)?,
            None => activated.clone(),
        };
        if self.opts.capture.contains(&id) {
            self.captures.insert(
                id,
                BlockCapture {
                    linear,
                    activated,
                    output: output.clone(),
                },
            );
        }
        Ok(output)
    }

    fn rnn(&mut self, c: &RnnCell, x: &Tensor) -> Result<Tensor> {
        let id = self.take_id();
        if x.rank() != 2 || x.dim(1) != c.w_ih.dim(0) {
            return Err(Error::InvalidShape {
                op: "rnn",
                msg: format!("expected [L, {}] sequence, got {:?}", c.w_ih.dim(0), x.shape()),
            });
        }
        let (l, d) = (x.dim(0), x.dim(1));
        let n = c.hidden();
        let mut h = vec![0.0; n];
        let mut pre = vec![0.0; n];
        for t in 0..l {
            let xt = &x.data()[t * d..(t + 1) * d];
            for (i, p) in pre.iter_mut().enumerate() {
                let mut acc = Sum2::default();
                for (k, xv) in xt.iter().enumerate() {
                    acc.add(xv * c.w_ih.data()[k * n + i]);
                }
                for (j, hv) in h.iter().enumerate() {
                    acc.add(hv * c.w_hh.data()[j * n + i]);
                }
                *p = acc.value() + c.bias.data()[i];
            }
            for (hv, p) in h.iter_mut().zip(&pre) {
                *hv = p.tanh();
            }
        }
        let out = Tensor::new(vec![n, 1, 1], h)?;
        if self.opts.capture.contains(&id) {
            self.captures.insert(
                id,
                BlockCapture {
                    linear: Tensor::new(vec![n, 1, 1], pre)?,
                    activated: out.clone(),
                    output: out.clone(),
                },
            );
        }
        Ok(out)
    }
}

fn add_same(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape {
            op: "residual",
            msg: format!("body {:?} vs shortcut {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn concat_channels(parts: Vec<Tensor>) -> Result<Tensor> {
    let spatial = parts[0].shape()[1..].to_vec();
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape()[1..] != spatial[..] {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("branch spatial {:?} vs {:?}", &p.shape()[1..], spatial),
            });
        }
        c += p.dim(0);
        data.extend(p.into_data());
    }
    let mut shape = vec![c];
    shape.extend(spatial);
    Tensor::new(shape, data)
}

impl Model {
    pub fn forward_with(&self, input: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardTrace> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::InvalidShape {
                op: "forward",
                msg: format!("input {:?}, model expects {:?}", input.shape(), self.input_shape),
            });
        }
        let mut w = Walker {
            opts,
            next: 0,
            captures: BTreeMap::new(),
        };
        let mut x = input.clone();
        for node in &self.nodes {
            x = match node {
                Node::Block(b) => w.conv(b, &x)?,
                Node::Residual(r) => {
                    let mut h = x.clone();
                    for b in &r.body {
                        h = w.conv(b, &h)?;
                    }
                    let s = match &r.shortcut {
                        Some(b) => w.conv(b, &x)?,
                        None => x,
                    };
                    tensor::activate(&add_same(&h, &s)?, r.post_act)
                }
                Node::Inception(inc) => {
                    let mut outs = Vec::with_capacity(inc.branches.len());
                    for br in &inc.branches {
                        let mut h = x.clone();
                        for b in br {
                            h = w.conv(b, &h)?;
                        }
                        outs.push(h);
                    }
                    concat_channels(outs)?
                }
                Node::GlobalPool => tensor::global_avg_pool(&x)?,
                Node::Rnn(c) => w.rnn(c, &x)?,
            };
        }
        if x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != 1 {
            return Err(Error::InvalidShape {
                op: "head",
                msg: format!("head expects a [C, 1, 1] feature vector, got {:?}", x.shape()),
            });
        }
        let out = w.conv(&self.head, &x)?;
        let k = out.len();
        Ok(ForwardTrace {
            logits: out.reshape(&[k])?,
            captures: w.captures,
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(input, &ForwardOptions::default())?.logits)
    }

    pub fn capture(&self, input: &Tensor, blocks: &[BlockId]) -> Result<ForwardTrace> {
        self.forward_with(
            input,
            &ForwardOptions {
                capture: blocks,
                norm_overrides: None,
            },
        )
    }
}

//! Parameter slices touching a single neuron.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::topology::Topology;
use super::{BlockId, BlockMut, BlockRef, Model, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronAddr {
    pub block: BlockId,
    pub neuron: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Mask,
    Bias,
    Gamma,
    Beta,
    Mean,
    Std,
    InputWeight,
    RecurrentWeight,
}

/// One scalar parameter: `index` is the flat row-major position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamRef {
    pub block: BlockId,
    pub kind: ParamKind,
    pub index: usize,
}

fn check(model: &Model, addr: NeuronAddr) -> Result<()> {
    match model.block_width(addr.block) {
        Some(w) if addr.neuron < w => Ok(()),
        _ => Err(Error::AddressOutOfRange {
            block: addr.block,
            neuron: addr.neuron,
        }),
    }
}

/// Every parameter that computes the neuron's value: its column of the
/// weight (and mask), its bias and its normalization entries.
pub fn incoming_weights(model: &Model, addr: NeuronAddr) -> Result<Vec<ParamRef>> {
    check(model, addr)?;
    let i = addr.neuron;
    let mk = |kind, index| ParamRef {
        block: addr.block,
        kind,
        index,
    };
    let mut out = Vec::new();
    match model.block(addr.block).unwrap() {
        BlockRef::Conv(b) => {
            let (cin, cout) = (b.in_channels(), b.out_channels());
            let (k1, k2) = b.kernel();
            let kk = k1 * k2;
            for r in 0..cin {
                for uv in 0..kk {
                    out.push(mk(ParamKind::Weight, (r * cout + i) * kk + uv));
                }
            }
            if b.mask.is_some() {
                for r in 0..cin {
                    for uv in 0..kk {
                        out.push(mk(ParamKind::Mask, (r * cout + i) * kk + uv));
                    }
                }
            }
            out.push(mk(ParamKind::Bias, i));
            match &b.norm {
                Norm::None => {}
                Norm::Batch { .. } => {
                    for k in [ParamKind::Gamma, ParamKind::Beta, ParamKind::Mean, ParamKind::Std] {
                        out.push(mk(k, i));
                    }
                }
                Norm::Group { .. } => {
                    out.push(mk(ParamKind::Gamma, i));
                    out.push(mk(ParamKind::Beta, i));
                }
            }
        }
        BlockRef::Rnn(c) => {
            let n = c.hidden();
            for d in 0..c.w_ih.dim(0) {
                out.push(mk(ParamKind::InputWeight, d * n + i));
            }
            for j in 0..n {
                out.push(mk(ParamKind::RecurrentWeight, j * n + i));
            }
            out.push(mk(ParamKind::Bias, i));
        }
    }
    Ok(out)
}

/// Every parameter that reads the neuron's value: consumer weight rows at the
/// neuron's channel (after residual and concat bookkeeping) and, for a
/// recurrent cell, its own recurrent row. Tied producers share these slices.
pub fn outgoing_weights(model: &Model, addr: NeuronAddr) -> Result<Vec<ParamRef>> {
    check(model, addr)?;
    let topo = Topology::of(model)?;
    if addr.block == topo.head() {
        return Err(Error::NoOutgoing(addr.block));
    }
    let info = topo.info(addr.block).unwrap();
    let (space, offset) = info.output.unwrap();
    let ch = offset + addr.neuron;
    let mut out = Vec::new();
    if let Some(c) = model.rnn(addr.block) {
        let n = c.hidden();
        for j in 0..n {
            out.push(ParamRef {
                block: addr.block,
                kind: ParamKind::RecurrentWeight,
                index: addr.neuron * n + j,
            });
        }
    }
    for &consumer in &topo.spaces[space].consumers {
        match model.block(consumer).unwrap() {
            BlockRef::Conv(b) => {
                let row = b.out_channels() * b.kernel().0 * b.kernel().1;
                let kinds: &[ParamKind] = if b.mask.is_some() {
                    &[ParamKind::Weight, ParamKind::Mask]
                } else {
                    &[ParamKind::Weight]
                };
                for &kind in kinds {
                    for k in 0..row {
                        out.push(ParamRef {
                            block: consumer,
                            kind,
                            index: ch * row + k,
                        });
                    }
                }
            }
            BlockRef::Rnn(c) => {
                let n = c.hidden();
                for j in 0..n {
                    out.push(ParamRef {
                        block: consumer,
                        kind: ParamKind::InputWeight,
                        index: ch * n + j,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn param_value(model: &Model, p: &ParamRef) -> Option<f64> {
    let v = match model.block(p.block)? {
        BlockRef::Conv(b) => match (p.kind, &b.norm) {
            (ParamKind::Weight, _) => b.weight.data().get(p.index),
            (ParamKind::Mask, _) => b.mask.as_ref()?.data().get(p.index),
            (ParamKind::Bias, _) => b.bias.data().get(p.index),
            (ParamKind::Gamma, n) => n.gamma()?.get(p.index),
            (ParamKind::Beta, n) => n.beta()?.get(p.index),
            (ParamKind::Mean, Norm::Batch { mean, .. }) => mean.get(p.index),
            (ParamKind::Std, Norm::Batch { std, .. }) => std.get(p.index),
            _ => None,
        },
        BlockRef::Rnn(c) => match p.kind {
            ParamKind::InputWeight => c.w_ih.data().get(p.index),
            ParamKind::RecurrentWeight => c.w_hh.data().get(p.index),
            ParamKind::Bias => c.bias.data().get(p.index),
            _ => None,
        },
    };
    v.copied()
}

pub fn param_mut<'a>(model: &'a mut Model, p: &ParamRef) -> Option<&'a mut f64> {
    match model.block_mut(p.block)? {
        BlockMut::Conv(b) => match (p.kind, &mut b.norm) {
            (ParamKind::Weight, _) => b.weight.data_mut().get_mut(p.index),
            (ParamKind::Mask, _) => b.mask.as_mut()?.data_mut().get_mut(p.index),
            (ParamKind::Bias, _) => b.bias.data_mut().get_mut(p.index),
            (ParamKind::Gamma, n) => n.gamma_beta_mut()?.0.get_mut(p.index),
            (ParamKind::Beta, n) => n.gamma_beta_mut()?.1.get_mut(p.index),
            (ParamKind::Mean, Norm::Batch { mean, .. }) => mean.get_mut(p.index),
            (ParamKind::Std, Norm::Batch { std, .. }) => std.get_mut(p.index),
            _ => None,
        },
        BlockMut::Rnn(c) => match p.kind {
            ParamKind::InputWeight => c.w_ih.data_mut().get_mut(p.index),
            ParamKind::RecurrentWeight => c.w_hh.data_mut().get_mut(p.index),
            ParamKind::Bias => c.bias.data_mut().get_mut(p.index),
            _ => None,
        },
    }
}

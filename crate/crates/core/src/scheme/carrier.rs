//! Carrier selection and the raw readout vectors each scheme thresholds.

use crate::error::{Error, Result};
use crate::model::topology::Topology;
use crate::model::{BlockId, BlockRef, ConvBlock, Model};
use crate::tensor::{Sum2, Tensor};

use super::key::{Payload, Scheme, WatermarkKey};
use super::passport::response;

fn incompatible(scheme: Scheme, reason: impl Into<String>) -> Error {
    Error::Incompatible {
        scheme: scheme.name(),
        reason: reason.into(),
    }
}

/// Non-head convolution blocks in id order.
fn hidden_convs(model: &Model) -> Vec<(BlockId, &ConvBlock)> {
    let head = model.head_id();
    (0..head.0)
        .filter_map(|i| model.conv(BlockId(i)).map(|b| (BlockId(i), b)))
        .collect()
}

/// Default carrier blocks for `scheme` on `model` for a `t`-bit signature.
pub(crate) fn default_carrier(scheme: Scheme, model: &Model, t: usize) -> Result<Vec<BlockId>> {
    let convs = hidden_convs(model);
    match scheme {
        Scheme::Uchida | Scheme::Riga => {
            // Largest kernel tensor among spatial convolutions (first on ties).
            let mut best: Option<(BlockId, usize)> = None;
            for (id, b) in &convs {
                let (k1, k2) = b.kernel();
                if k1 * k2 == 1 {
                    continue;
                }
                let d = b.out_channels() * k1 * k2;
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((*id, d));
                }
            }
            match best {
                Some((id, d)) if d >= t => Ok(vec![id]),
                _ => Err(incompatible(scheme, format!("no spatial convolution with at least {t} kernel entries"))),
            }
        }
        Scheme::Deepipr | Scheme::PassportAware => {
            // Every normalization layer becomes a passport layer.
            let normed: Vec<_> = convs.iter().filter(|(_, b)| b.norm.gamma().is_some()).collect();
            if normed.iter().map(|(_, b)| b.out_channels()).sum::<usize>() >= t {
                Ok(normed.iter().map(|(id, _)| *id).collect())
            } else {
                Err(incompatible(scheme, format!("needs normalized blocks with {t} channels in total")))
            }
        }
        Scheme::ScaleSign => {
            // A contiguous run of normalized blocks ending at the last hidden one.
            let mut run = Vec::new();
            let mut total = 0;
            for (id, b) in convs.iter().rev() {
                if b.norm.gamma().is_none() {
                    break;
                }
                run.push(*id);
                total += b.out_channels();
                if total >= t {
                    run.reverse();
                    return Ok(run);
                }
            }
            Err(incompatible(scheme, format!("needs normalized blocks with {t} channels at the end of the network")))
        }
        Scheme::GreedyResiduals => convs
            .iter()
            .rev()
            .find(|(_, b)| b.out_channels() >= t)
            .map(|(id, _)| vec![*id])
            .ok_or_else(|| incompatible(scheme, format!("no convolution with {t} output channels"))),
        Scheme::LotteryMask => {
            let topo = Topology::of(model)?;
            convs
                .iter()
                .find(|(id, b)| {
                    let input = topo.info(*id).unwrap().input;
                    !topo.spaces[input].fixed && b.in_channels() * b.out_channels() >= t
                })
                .map(|(id, _)| vec![*id])
                .ok_or_else(|| incompatible(scheme, format!("no convolution with {t} channel pairs")))
        }
        Scheme::Deepsigns => convs
            .last()
            .map(|(id, _)| vec![*id])
            .ok_or_else(|| incompatible(scheme, "no hidden convolution")),
        Scheme::IprIc => (0..model.num_blocks())
            .map(BlockId)
            .find(|&id| model.rnn(id).is_some_and(|c| c.hidden() >= t))
            .map(|id| vec![id])
            .ok_or_else(|| incompatible(scheme, format!("needs a recurrent cell with {t} hidden units"))),
    }
}

pub(crate) fn conv_carrier(model: &Model, id: BlockId) -> Result<&ConvBlock> {
    match model.block(id) {
        Some(BlockRef::Conv(b)) if id != model.head_id() => Ok(b),
        Some(_) => Err(Error::CarrierOutOfRange(format!("block {id} is not a hidden convolution"))),
        None => Err(Error::CarrierOutOfRange(format!(
            "block {id} does not exist ({} blocks)",
            model.num_blocks()
        ))),
    }
}

/// `mean_r W[r, o, u, v]`, flattened `(o, u, v)` and concatenated over blocks.
pub(crate) fn mean_kernel(model: &Model, blocks: &[BlockId]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &id in blocks {
        let b = conv_carrier(model, id)?;
        let cin = b.in_channels();
        let row = b.weight.inner_len();
        for j in 0..row {
            let mut s = Sum2::default();
            for r in 0..cin {
                s.add(b.weight.data()[r * row + j]);
            }
            out.push(s.value() / cin as f64);
        }
    }
    Ok(out)
}

pub(crate) fn gammas(model: &Model, blocks: &[BlockId]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &id in blocks {
        let b = conv_carrier(model, id)?;
        let g = b
            .norm
            .gamma()
            .ok_or_else(|| Error::CarrierOutOfRange(format!("block {id} has no normalization scale")))?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

/// Weights feeding output channel `o`, in `(r, u, v)` order.
pub(crate) fn weight_row(b: &ConvBlock, o: usize) -> Vec<f64> {
    let (cin, cout) = (b.in_channels(), b.out_channels());
    let kk = b.kernel().0 * b.kernel().1;
    let mut row = Vec::with_capacity(cin * kk);
    for r in 0..cin {
        row.extend_from_slice(&b.weight.data()[(r * cout + o) * kk..(r * cout + o + 1) * kk]);
    }
    row
}

/// Greedy residual value of one row: average-pool with non-overlapping
/// windows, keep the `ceil(eta * n)` pooled entries of largest magnitude
/// (lower index wins ties), return their mean and the kept window indices.
pub(crate) fn greedy_row(row: &[f64], eta: f64, width: usize) -> (f64, Vec<usize>) {
    let pooled: Vec<f64> = row
        .chunks_exact(width)
        .map(|c| c.iter().sum::<f64>() / width as f64)
        .collect();
    let keep = ((eta * pooled.len() as f64).ceil() as usize).clamp(1, pooled.len().max(1));
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].abs().total_cmp(&pooled[a].abs()).then(a.cmp(&b)));
    order.truncate(keep);
    let mean = order.iter().map(|&i| pooled[i]).sum::<f64>() / keep as f64;
    (mean, order)
}

pub(crate) fn greedy_values(model: &Model, blocks: &[BlockId], eta: f64, width: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &id in blocks {
        let b = conv_carrier(model, id)?;
        if b.in_channels() * b.kernel().0 * b.kernel().1 < width {
            return Err(Error::CarrierOutOfRange(format!("block {id} rows are shorter than the pool width")));
        }
        for o in 0..b.out_channels() {
            out.push(greedy_row(&weight_row(b, o), eta, width).0);
        }
    }
    Ok(out)
}

/// Mean of the binary mask over kernel taps for each `(r, o)` pair. Blocks
/// without a mask read as fully dense.
pub(crate) fn mask_density(model: &Model, blocks: &[BlockId]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &id in blocks {
        let b = conv_carrier(model, id)?;
        let kk = b.kernel().0 * b.kernel().1;
        let pairs = b.in_channels() * b.out_channels();
        match &b.mask {
            None => out.extend(std::iter::repeat_n(1.0, pairs)),
            Some(m) => out.extend(m.data().chunks_exact(kk).map(|c| c.iter().sum::<f64>() / kk as f64)),
        }
    }
    Ok(out)
}

/// Trigger-averaged spatial mean of each block's response `W x + b`, taken
/// before normalization so that a sign flip through the norm shows up.
pub(crate) fn trigger_means(model: &Model, blocks: &[BlockId], triggers: &[Tensor]) -> Result<Vec<f64>> {
    for &id in blocks {
        conv_carrier(model, id)?;
    }
    let mut sums: Vec<Vec<f64>> = blocks
        .iter()
        .map(|&id| vec![0.0; model.conv(id).unwrap().out_channels()])
        .collect();
    for x in triggers {
        let trace = model.capture(x, blocks)?;
        for (k, id) in blocks.iter().enumerate() {
            let z = &trace.captures[id].linear;
            let inner = z.inner_len();
            for (c, s) in sums[k].iter_mut().enumerate() {
                *s += z.data()[c * inner..(c + 1) * inner].iter().sum::<f64>() / inner as f64;
            }
        }
    }
    let n = triggers.len().max(1) as f64;
    Ok(sums.into_iter().flatten().map(|s| s / n).collect())
}

pub(crate) fn final_hidden(model: &Model, block: BlockId, trigger: &Tensor) -> Result<Vec<f64>> {
    if model.rnn(block).is_none() {
        return Err(Error::CarrierOutOfRange(format!("block {block} is not a recurrent cell")));
    }
    let trace = model.capture(trigger, &[block])?;
    Ok(trace.captures[&block].output.data().to_vec())
}

fn linear(p: &Tensor, z: &[f64]) -> Result<Vec<f64>> {
    if p.rank() != 2 || p.dim(1) != z.len() {
        return Err(Error::Key(format!(
            "projection {:?} does not match carrier of length {}",
            p.shape(),
            z.len()
        )));
    }
    let d = z.len();
    Ok((0..p.dim(0))
        .map(|t| {
            let mut s = Sum2::default();
            for (a, b) in p.data()[t * d..(t + 1) * d].iter().zip(z) {
                s.add(a * b);
            }
            s.value()
        })
        .collect())
}

fn pick(v: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            v.get(i).copied().ok_or_else(|| {
                Error::CarrierOutOfRange(format!("index {i} beyond carrier of length {}", v.len()))
            })
        })
        .collect()
}

/// The carrier values before the scheme's own projection (the vector that
/// embedding optimizes), plus per-block passport responses where relevant.
pub(crate) fn latent(model: &Model, key: &WatermarkKey) -> Result<Vec<f64>> {
    let blocks = &key.carrier.blocks;
    if blocks.is_empty() {
        return Err(Error::CarrierOutOfRange("no carrier blocks".into()));
    }
    match &key.payload {
        Payload::Uchida { .. } | Payload::Riga { .. } => mean_kernel(model, blocks),
        Payload::ScaleSign => gammas(model, blocks),
        Payload::GreedyResiduals { eta, pool_width } => greedy_values(model, blocks, *eta, *pool_width),
        Payload::LotteryMask { .. } => mask_density(model, blocks),
        Payload::Deepsigns { triggers, .. } => trigger_means(model, blocks, triggers),
        Payload::IprIc { trigger } => final_hidden(model, blocks[0], trigger),
        Payload::Deepipr { passports_gamma, .. } | Payload::PassportAware { passports_gamma, .. } => {
            if passports_gamma.len() != blocks.len() {
                return Err(Error::Key("one passport per carrier block required".into()));
            }
            let mut out = Vec::new();
            for (b, &id) in blocks.iter().enumerate() {
                out.extend(response(conv_carrier(model, id)?, &passports_gamma[b])?);
            }
            Ok(out)
        }
    }
}

/// Applies the key-side map from latent carrier values to one real number
/// per signature bit.
pub(crate) fn project(key: &WatermarkKey, z: &[f64]) -> Result<Vec<f64>> {
    let idx = &key.carrier.indices;
    match &key.payload {
        Payload::Uchida { projection } | Payload::Deepsigns { projection, .. } => linear(projection, z),
        Payload::Riga { extractor } => {
            if extractor.inputs() != z.len() {
                return Err(Error::Key(format!(
                    "extractor takes {} inputs, carrier has {}",
                    extractor.inputs(),
                    z.len()
                )));
            }
            Ok(extractor.forward(z))
        }
        Payload::ScaleSign | Payload::GreedyResiduals { .. } | Payload::IprIc { .. } | Payload::Deepipr { .. } => {
            pick(z, idx)
        }
        Payload::LotteryMask { .. } => Ok(pick(z, idx)?.into_iter().map(|v| v - 0.5).collect()),
        Payload::PassportAware {
            gen_gamma, projection, ..
        } => {
            let g = generate(gen_gamma, z)?;
            linear(projection, &g)
        }
    }
}

/// Runs each block's generator on its slice of the latent vector.
pub(crate) fn generate(gens: &[super::mlp::Mlp], z: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(z.len());
    let mut off = 0;
    for g in gens {
        let n = g.inputs();
        let slice = z
            .get(off..off + n)
            .ok_or_else(|| Error::Key("generators do not match carrier width".into()))?;
        out.extend(g.forward(slice));
        off += n;
    }
    if off != z.len() {
        return Err(Error::Key("generators do not match carrier width".into()));
    }
    Ok(out)
}

pub(crate) fn readout(model: &Model, key: &WatermarkKey) -> Result<Vec<f64>> {
    let z = latent(model, key)?;
    let v = project(key, &z)?;
    if v.len() != key.signature.len() {
        return Err(Error::Key(format!(
            "carrier yields {} bits, signature has {}",
            v.len(),
            key.signature.len()
        )));
    }
    Ok(v)
}

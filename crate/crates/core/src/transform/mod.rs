//! Function-preserving neuron transforms.
//!
//! * Shuffle: every producer of a unit permutes its output axis
//!   (`new[i] = old[p[i]]`) and every consumer permutes the matching input
//!   rows.
//! * Scale: incoming parameters of each neuron are multiplied by `lambda_i`
//!   and consumer rows divided by it. Requires positively homogeneous
//!   activations. Batch-norm blocks scale weight, bias, gamma, beta, mean and
//!   std; group-norm blocks scale only gamma and beta (the variance floor
//!   would otherwise leak the scale); blocks without norm scale weight and
//!   bias.
//! * Sign flip: with batch norm, negate the weight column, bias, gamma and
//!   running mean; with group norm, the weight column, bias and gamma. Nothing
//!   downstream changes. Blocks without norm but with an odd activation (tanh,
//!   identity, recurrent cells) instead negate incoming and outgoing
//!   parameters; a recurrent matrix becomes `S W_hh S`.
//!
//! Public functions take any member of a unit and expand to the whole unit,
//! so tied producers (residual sums) move together.

mod attack;
mod plan;

use crate::error::{Error, Result};
use crate::model::topology::{has_max_pool, Topology, Unit};
use crate::model::{BlockId, BlockMut, BlockRef, Model, Norm};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub use attack::{attack, unified_attack, AttackConfig, ScaleMode, TransformSet};
pub use plan::{apply_plan, invert_plan, TransformPlan, UnitRecord, PLAN_VERSION};

pub(crate) fn validate_perm(p: &[usize], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} for {n} neurons", p.len())));
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidPermutation(format!("{p:?} is not a bijection on 0..{n}")));
        }
    }
    Ok(())
}

pub fn inverse_perm(p: &[usize]) -> Vec<usize> {
    let mut q = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        q[j] = i;
    }
    q
}

/// Grouped permutation for group-normalized layers: whole groups move
/// (outer permutation) and channels move only within their group.
/// `p[k*m + r] = outer[k]*m + inner[k][r]` with `m = n / groups`.
pub fn grouped_perm(n: usize, groups: usize, rng: &mut Prng) -> Result<Vec<usize>> {
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(Error::Divisibility { channels: n, groups });
    }
    let m = n / groups;
    let outer = rng.permutation(groups);
    let mut p = Vec::with_capacity(n);
    for &o in &outer {
        let inner = rng.permutation(m);
        p.extend(inner.iter().map(|&r| o * m + r));
    }
    Ok(p)
}

/// Channels per normalization group shared by the unit's group-norm members.
pub(crate) fn unit_group_size(model: &Model, unit: &Unit) -> Result<Option<usize>> {
    let mut size = None;
    for &m in &unit.members {
        if let Some(Norm::Group { groups, .. }) = model.conv(m).map(|b| &b.norm) {
            let g = unit.width / groups;
            match size {
                None => size = Some(g),
                Some(s) if s == g => {}
                Some(_) => {
                    return Err(Error::GroupStructure {
                        block: m,
                        msg: "tied producers disagree on group size".into(),
                    })
                }
            }
        }
    }
    Ok(size)
}

fn check_perm_groups(p: &[usize], m: usize, block: BlockId) -> Result<()> {
    for (k, chunk) in p.chunks(m).enumerate() {
        let target = chunk[0] / m;
        if chunk.iter().any(|&j| j / m != target) {
            return Err(Error::GroupStructure {
                block,
                msg: format!("permutation splits group {k}"),
            });
        }
    }
    Ok(())
}

fn check_group_constant<T: PartialEq + Copy>(v: &[T], m: usize, block: BlockId, what: &str) -> Result<()> {
    for (k, chunk) in v.chunks(m).enumerate() {
        if chunk.iter().any(|&x| x != chunk[0]) {
            return Err(Error::GroupStructure {
                block,
                msg: format!("{what} varies inside group {k}"),
            });
        }
    }
    Ok(())
}

fn permute_axis1(t: &mut Tensor, p: &[usize]) {
    let (a, n) = (t.dim(0), t.dim(1));
    let inner: usize = t.shape()[2..].iter().product();
    let old = t.data().to_vec();
    let d = t.data_mut();
    for r in 0..a {
        for (i, &src) in p.iter().enumerate() {
            let dst = (r * n + i) * inner;
            let from = (r * n + src) * inner;
            d[dst..dst + inner].copy_from_slice(&old[from..from + inner]);
        }
    }
}

fn permute_rows(t: &mut Tensor, offset: usize, p: &[usize]) {
    let row = t.inner_len();
    let old = t.data().to_vec();
    let d = t.data_mut();
    for (i, &src) in p.iter().enumerate() {
        let dst = (offset + i) * row;
        let from = (offset + src) * row;
        d[dst..dst + row].copy_from_slice(&old[from..from + row]);
    }
}

fn permute_vec(v: &mut [f64], p: &[usize]) {
    let old = v.to_vec();
    for (i, &src) in p.iter().enumerate() {
        v[i] = old[src];
    }
}

/// In-place per-column update on axis 1.
fn map_axis1(t: &mut Tensor, mut f: impl FnMut(usize, f64) -> f64) {
    let (a, n) = (t.dim(0), t.dim(1));
    let inner: usize = t.shape()[2..].iter().product();
    let d = t.data_mut();
    for r in 0..a {
        for i in 0..n {
            for v in &mut d[(r * n + i) * inner..(r * n + i + 1) * inner] {
                *v = f(i, *v);
            }
        }
    }
}

fn map_rows(t: &mut Tensor, offset: usize, width: usize, mut f: impl FnMut(usize, f64) -> f64) {
    let row = t.inner_len();
    let d = t.data_mut();
    for i in 0..width {
        for v in &mut d[(offset + i) * row..(offset + i + 1) * row] {
            *v = f(i, *v);
        }
    }
}

fn map_vec(v: &mut [f64], mut f: impl FnMut(usize, f64) -> f64) {
    for (i, x) in v.iter_mut().enumerate() {
        *x = f(i, *x);
    }
}

/// Consumer input rows `[offset, offset + width)`. The binary mask follows
/// permutations only; scaling or negating it would change the gate.
fn for_consumers(model: &mut Model, unit: &Unit, with_mask: bool, mut f: impl FnMut(&mut Tensor, usize)) {
    for &c in &unit.consumers {
        match model.block_mut(c).unwrap() {
            BlockMut::Conv(b) => {
                f(&mut b.weight, unit.offset);
                if let Some(m) = b.mask.as_mut().filter(|_| with_mask) {
                    f(m, unit.offset);
                }
            }
            BlockMut::Rnn(cell) => f(&mut cell.w_ih, unit.offset),
        }
    }
}

pub(crate) fn shuffle_members(model: &mut Model, members: &[BlockId], unit: &Unit, p: &[usize]) {
    for &m in members {
        match model.block_mut(m).unwrap() {
            BlockMut::Conv(b) => {
                permute_axis1(&mut b.weight, p);
                if let Some(mask) = &mut b.mask {
                    permute_axis1(mask, p);
                }
                permute_vec(b.bias.data_mut(), p);
                match &mut b.norm {
                    Norm::None => {}
                    Norm::Batch { gamma, beta, mean, std } => {
                        for v in [gamma, beta, mean, std] {
                            permute_vec(v, p);
                        }
                    }
                    Norm::Group { gamma, beta, .. } => {
                        permute_vec(gamma, p);
                        permute_vec(beta, p);
                    }
                }
            }
            BlockMut::Rnn(c) => {
                permute_axis1(&mut c.w_ih, p);
                permute_vec(c.bias.data_mut(), p);
                permute_axis1(&mut c.w_hh, p);
                permute_rows(&mut c.w_hh, 0, p);
            }
        }
    }
    for_consumers(model, unit, true, |t, off| permute_rows(t, off, p));
}

pub(crate) fn shuffle_unit(model: &mut Model, unit: &Unit, p: &[usize]) -> Result<()> {
    validate_perm(p, unit.width)?;
    if unit.fixed {
        return Err(Error::IllegalTransform {
            transform: "layer_shuffle",
            block: unit.members[0],
            reason: "unit writes the model input space".into(),
        });
    }
    if let Some(m) = unit_group_size(model, unit)? {
        check_perm_groups(p, m, unit.members[0])?;
    }
    shuffle_members(model, &unit.members, unit, p);
    Ok(())
}

pub(crate) fn check_scale(model: &Model, unit: &Unit, lambda: &[f64]) -> Result<()> {
    let block = unit.members[0];
    if lambda.len() != unit.width {
        return Err(Error::LengthDiffers {
            left: lambda.len(),
            right: unit.width,
        });
    }
    if let Some((i, &v)) = lambda.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositiveScale { neuron: i, value: v });
    }
    let illegal = |reason: &str| Error::IllegalTransform {
        transform: "neuron_scale",
        block,
        reason: reason.into(),
    };
    if unit.fixed {
        return Err(illegal("unit writes the model input space"));
    }
    for &m in &unit.members {
        match model.block(m).unwrap() {
            BlockRef::Rnn(_) => return Err(illegal("recurrent tanh cell is not positively homogeneous")),
            BlockRef::Conv(b) if !b.act.is_positively_homogeneous() => {
                return Err(illegal("activation is not positively homogeneous"))
            }
            _ => {}
        }
    }
    if unit.post_acts.iter().any(|a| !a.is_positively_homogeneous()) {
        return Err(illegal("post-sum activation is not positively homogeneous"));
    }
    if let Some(m) = unit_group_size(model, unit)? {
        check_group_constant(lambda, m, block, "scale")?;
    }
    Ok(())
}

/// `inverse` divides incoming and multiplies outgoing.
pub(crate) fn scale_unit(model: &mut Model, unit: &Unit, lambda: &[f64], inverse: bool) {
    let up = |i: usize, v: f64| if inverse { v / lambda[i] } else { v * lambda[i] };
    let down = |i: usize, v: f64| if inverse { v * lambda[i] } else { v / lambda[i] };
    for &m in &unit.members {
        if let BlockMut::Conv(b) = model.block_mut(m).unwrap() {
            match &mut b.norm {
                Norm::None => {
                    map_axis1(&mut b.weight, up);
                    map_vec(b.bias.data_mut(), up);
                }
                Norm::Batch { gamma, beta, mean, std } => {
                    map_axis1(&mut b.weight, up);
                    map_vec(b.bias.data_mut(), up);
                    for v in [gamma, beta, mean, std] {
                        map_vec(v, up);
                    }
                }
                Norm::Group { gamma, beta, .. } => {
                    map_vec(gamma, up);
                    map_vec(beta, up);
                }
            }
        }
    }
    let width = unit.width;
    for_consumers(model, unit, false, |t, off| map_rows(t, off, width, down));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FlipPath {
    Norm,
    Odd,
}

/// How a sign flip can be realized on `block`, or why it cannot.
pub(crate) fn flip_path(model: &Model, topo: &Topology, block: BlockId, s: &[i8]) -> Result<FlipPath> {
    let illegal = |reason: &str| Error::IllegalTransform {
        transform: "sign_flip",
        block,
        reason: reason.into(),
    };
    let width = model.block_width(block).ok_or(Error::AddressOutOfRange { block, neuron: 0 })?;
    if s.len() != width {
        return Err(Error::LengthDiffers { left: s.len(), right: width });
    }
    if s.iter().any(|&v| v != 1 && v != -1) {
        return Err(illegal("signs must be +1 or -1"));
    }
    if block == topo.head() {
        return Err(Error::NoOutgoing(block));
    }
    match model.block(block).unwrap() {
        BlockRef::Conv(b) => match &b.norm {
            Norm::Batch { .. } => return Ok(FlipPath::Norm),
            Norm::Group { groups, .. } => {
                check_group_constant(s, width / groups, block, "sign")?;
                return Ok(FlipPath::Norm);
            }
            Norm::None if !b.act.is_odd() => return Err(illegal("no normalization and activation is not odd")),
            Norm::None if has_max_pool(model, block) => return Err(illegal("max pooling does not commute with negation")),
            Norm::None => {}
        },
        BlockRef::Rnn(_) => {}
    }
    let unit = topo.unit_of(block)?;
    if unit.is_tied() {
        return Err(illegal("outgoing negation would also hit tied producers"));
    }
    if unit.fixed {
        return Err(illegal("unit writes the model input space"));
    }
    if unit.post_acts.iter().any(|a| !a.is_odd()) {
        return Err(illegal("post-sum activation is not odd"));
    }
    Ok(FlipPath::Odd)
}

pub(crate) fn flip_block(model: &mut Model, topo: &Topology, block: BlockId, s: &[i8], path: FlipPath) {
    let neg = |i: usize, v: f64| if s[i] < 0 { -v } else { v };
    match model.block_mut(block).unwrap() {
        BlockMut::Conv(b) => {
            map_axis1(&mut b.weight, neg);
            map_vec(b.bias.data_mut(), neg);
            match &mut b.norm {
                Norm::None => {}
                Norm::Batch { gamma, mean, .. } => {
                    map_vec(gamma, neg);
                    map_vec(mean, neg);
                }
                Norm::Group { gamma, .. } => map_vec(gamma, neg),
            }
        }
        BlockMut::Rnn(c) => {
            map_axis1(&mut c.w_ih, neg);
            map_vec(c.bias.data_mut(), neg);
            let n = c.hidden();
            map_vec(c.w_hh.data_mut(), |k, v| {
                let (j, i) = (k / n, k % n);
                if s[i] * s[j] < 0 {
                    -v
                } else {
                    v
                }
            });
        }
    }
    if path == FlipPath::Odd {
        let unit = topo.unit_of(block).expect("checked by flip_path");
        for_consumers(model, &unit, false, |t, off| map_rows(t, off, s.len(), neg));
    }
}

/// Permutes the unit containing `block`. `p` must respect normalization groups.
pub fn layer_shuffle(model: &Model, block: BlockId, p: &[usize]) -> Result<Model> {
    let topo = Topology::of(model)?;
    let unit = topo.unit_of(block)?;
    let mut out = model.clone();
    shuffle_unit(&mut out, &unit, p)?;
    Ok(out)
}

/// Permutes only `block` and its consumers, ignoring tied producers. Not
/// function-preserving when `block` shares its output channels; kept to
/// demonstrate why ties are needed.
pub fn layer_shuffle_single(model: &Model, block: BlockId, p: &[usize]) -> Result<Model> {
    let topo = Topology::of(model)?;
    let unit = topo.unit_of(block)?;
    validate_perm(p, unit.width)?;
    let mut out = model.clone();
    shuffle_members(&mut out, &[block], &unit, p);
    Ok(out)
}

pub fn neuron_scale(model: &Model, block: BlockId, lambda: &[f64]) -> Result<Model> {
    let topo = Topology::of(model)?;
    let unit = topo.unit_of(block)?;
    check_scale(model, &unit, lambda)?;
    let mut out = model.clone();
    scale_unit(&mut out, &unit, lambda, false);
    Ok(out)
}

/// Flips the signs of `block`'s neurons where `s[i] == -1`.
pub fn sign_flip(model: &Model, block: BlockId, s: &[i8]) -> Result<Model> {
    let topo = Topology::of(model)?;
    let path = flip_path(model, &topo, block, s)?;
    let mut out = model.clone();
    flip_block(&mut out, &topo, block, s, path);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouped_perm_respects_groups() {
        let mut rng = Prng::new(1);
        let p = grouped_perm(12, 3, &mut rng).unwrap();
        validate_perm(&p, 12).unwrap();
        check_perm_groups(&p, 4, BlockId(0)).unwrap();
    }

    #[test]
    fn grouped_perm_divisibility() {
        let mut rng = Prng::new(1);
        assert!(matches!(grouped_perm(10, 4, &mut rng), Err(Error::Divisibility { .. })));
    }

    #[test]
    fn perm_validation() {
        assert!(validate_perm(&[1, 0, 2], 3).is_ok());
        assert!(validate_perm(&[1, 1, 2], 3).is_err());
        assert!(validate_perm(&[0, 1], 3).is_err());
        assert!(validate_perm(&[0, 3, 1], 3).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = vec![2, 0, 3, 1];
        let q = inverse_perm(&p);
        let mut v = vec![10.0, 11.0, 12.0, 13.0];
        permute_vec(&mut v, &p);
        permute_vec(&mut v, &q);
        assert_eq!(v, vec![10.0, 11.0, 12.0, 13.0]);
    }
}

//! Layered network description and its deterministic forward pass.
//!
//! A [`Model`] is a sequence of [`Node`]s followed by a 1x1 output head.
//! Blocks (convolutions, fully connected layers expressed as 1x1
//! convolutions, recurrent cells) are numbered by a flat traversal: nodes in
//! order, residual bodies before shortcuts, inception branches left to right,
//! and the head last.

mod container;
mod forward;
pub mod topology;
pub mod toy;
pub mod views;

use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, PoolSpec, Tensor};

pub use container::{read_model, write_model, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use forward::{BlockCapture, ForwardOptions, ForwardTrace, NormOverrides};
pub use topology::Topology;
pub use toy::{gen_toy_model, Arch};
pub use views::{incoming_weights, outgoing_weights, NeuronAddr, ParamKind, ParamRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub usize);

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "b{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Norm {
    None,
    /// Inference-mode batch norm with frozen statistics.
    Batch {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    /// Group norm; statistics are computed from the input on the fly.
    Group {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        groups: usize,
    },
}

impl Norm {
    pub fn gamma(&self) -> Option<&[f64]> {
        match self {
            Norm::None => None,
            Norm::Batch { gamma, .. } | Norm::Group { gamma, .. } => Some(gamma),
        }
    }

    pub fn beta(&self) -> Option<&[f64]> {
        match self {
            Norm::None => None,
            Norm::Batch { beta, .. } | Norm::Group { beta, .. } => Some(beta),
        }
    }

    pub fn gamma_beta_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Norm::None => None,
            Norm::Batch { gamma, beta, .. } | Norm::Group { gamma, beta, .. } => Some((gamma, beta)),
        }
    }

    pub fn groups(&self) -> Option<usize> {
        match self {
            Norm::Group { groups, .. } => Some(*groups),
            _ => None,
        }
    }
}

/// Convolution (or 1x1 "linear") followed by optional normalization, an
/// activation and optional pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[C_in, C_out, k1, k2]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Norm,
    pub act: Activation,
    pub pool: Option<PoolSpec>,
    pub stride: usize,
    pub padding: usize,
    /// Binary gate multiplied into `weight`, same shape.
    pub mask: Option<Tensor>,
}

impl ConvBlock {
    pub fn in_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    pub fn effective_weight(&self) -> std::borrow::Cow<'_, Tensor> {
        match &self.mask {
            None => std::borrow::Cow::Borrowed(&self.weight),
            Some(m) => {
                let mut w = self.weight.clone();
                for (v, g) in w.data_mut().iter_mut().zip(m.data()) {
                    *v *= g;
                }
                std::borrow::Cow::Owned(w)
            }
        }
    }
}

/// Elman cell `h_t = tanh(x_t W_ih + h_{t-1} W_hh + b)` over a `[L, D]`
/// sequence; its output is the final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCell {
    /// `[D, N]`.
    pub w_ih: Tensor,
    /// `[N, N]`, rows index the previous state.
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl RnnCell {
    pub fn hidden(&self) -> usize {
        self.w_hh.dim(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub body: Vec<ConvBlock>,
    /// `None` is the identity shortcut.
    pub shortcut: Option<ConvBlock>,
    pub post_act: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inception {
    /// Branch outputs are concatenated along channels in this order.
    pub branches: Vec<Vec<ConvBlock>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Block(ConvBlock),
    Residual(Residual),
    Inception(Inception),
    GlobalPool,
    Rnn(RnnCell),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
    /// `[C, K, 1, 1]` classifier on a pooled feature vector.
    pub head: ConvBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPath {
    Plain(usize),
    Body(usize, usize),
    Shortcut(usize),
    Branch(usize, usize, usize),
    Rnn(usize),
    Head,
}

pub enum BlockRef<'a> {
    Conv(&'a ConvBlock),
    Rnn(&'a RnnCell),
}

pub enum BlockMut<'a> {
    Conv(&'a mut ConvBlock),
    Rnn(&'a mut RnnCell),
}

impl Model {
    pub fn block_paths(&self) -> Vec<BlockPath> {
        let mut out = Vec::new();
        for (n, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Block(_) => out.push(BlockPath::Plain(n)),
                Node::Residual(r) => {
                    out.extend((0..r.body.len()).map(|j| BlockPath::Body(n, j)));
                    if r.shortcut.is_some() {
                        out.push(BlockPath::Shortcut(n));
                    }
                }
                Node::Inception(inc) => {
                    for (b, br) in inc.branches.iter().enumerate() {
                        out.extend((0..br.len()).map(|j| BlockPath::Branch(n, b, j)));
                    }
                }
                Node::GlobalPool => {}
                Node::Rnn(_) => out.push(BlockPath::Rnn(n)),
            }
        }
        out.push(BlockPath::Head);
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.block_paths().len()
    }

    pub fn head_id(&self) -> BlockId {
        BlockId(self.num_blocks() - 1)
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels()
    }

    pub fn path(&self, id: BlockId) -> Option<BlockPath> {
        self.block_paths().get(id.0).copied()
    }

    pub fn block(&self, id: BlockId) -> Option<BlockRef<'_>> {
        let path = self.path(id)?;
        Some(match path {
            BlockPath::Head => BlockRef::Conv(&self.head),
            BlockPath::Plain(n) => match &self.nodes[n] {
                Node::Block(b) => BlockRef::Conv(b),
                _ => unreachable!(),
            },
            BlockPath::Body(n, j) => match &self.nodes[n] {
                Node::Residual(r) => BlockRef::Conv(&r.body[j]),
                _ => unreachable!(),
            },
            BlockPath::Shortcut(n) => match &self.nodes[n] {
                Node::Residual(r) => BlockRef::Conv(r.shortcut.as_ref().unwrap()),
                _ => unreachable!(),
            },
            BlockPath::Branch(n, b, j) => match &self.nodes[n] {
                Node::Inception(inc) => BlockRef::Conv(&inc.branches[b][j]),
                _ => unreachable!(),
            },
            BlockPath::Rnn(n) => match &self.nodes[n] {
                Node::Rnn(c) => BlockRef::Rnn(c),
                _ => unreachable!(),
            },
        })
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<BlockMut<'_>> {
        let path = self.path(id)?;
        Some(match path {
            BlockPath::Head => BlockMut::Conv(&mut self.head),
            BlockPath::Plain(n) => match &mut self.nodes[n] {
                Node::Block(b) => BlockMut::Conv(b),
                _ => unreachable!(),
            },
            BlockPath::Body(n, j) => match &mut self.nodes[n] {
                Node::Residual(r) => BlockMut::Conv(&mut r.body[j]),
                _ => unreachable!(),
            },
            BlockPath::Shortcut(n) => match &mut self.nodes[n] {
                Node::Residual(r) => BlockMut::Conv(r.shortcut.as_mut().unwrap()),
                _ => unreachable!(),
            },
            BlockPath::Branch(n, b, j) => match &mut self.nodes[n] {
                Node::Inception(inc) => BlockMut::Conv(&mut inc.branches[b][j]),
                _ => unreachable!(),
            },
            BlockPath::Rnn(n) => match &mut self.nodes[n] {
                Node::Rnn(c) => BlockMut::Rnn(c),
                _ => unreachable!(),
            },
        })
    }

    pub fn conv(&self, id: BlockId) -> Option<&ConvBlock> {
        match self.block(id)? {
            BlockRef::Conv(b) => Some(b),
            BlockRef::Rnn(_) => None,
        }
    }

    pub fn conv_mut(&mut self, id: BlockId) -> Option<&mut ConvBlock> {
        match self.block_mut(id)? {
            BlockMut::Conv(b) => Some(b),
            BlockMut::Rnn(_) => None,
        }
    }

    pub fn rnn(&self, id: BlockId) -> Option<&RnnCell> {
        match self.block(id)? {
            BlockRef::Rnn(c) => Some(c),
            BlockRef::Conv(_) => None,
        }
    }

    pub fn rnn_mut(&mut self, id: BlockId) -> Option<&mut RnnCell> {
        match self.block_mut(id)? {
            BlockMut::Rnn(c) => Some(c),
            BlockMut::Conv(_) => None,
        }
    }

    /// Output width of a block (neurons addressable on it).
    pub fn block_width(&self, id: BlockId) -> Option<usize> {
        Some(match self.block(id)? {
            BlockRef::Conv(b) => b.out_channels(),
            BlockRef::Rnn(c) => c.hidden(),
        })
    }

    /// Visits every parameter tensor or vector in a fixed order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &[f64])) {
        for id in 0..self.num_blocks() {
            match self.block(BlockId(id)).unwrap() {
                BlockRef::Conv(b) => {
                    f("weight", b.weight.data());
                    f("bias", b.bias.data());
                    if let Some(m) = &b.mask {
                        f("mask", m.data());
                    }
                    match &b.norm {
                        Norm::None => {}
                        Norm::Batch { gamma, beta, mean, std } => {
                            f("gamma", gamma);
                            f("beta", beta);
                            f("mean", mean);
                            f("std", std);
                        }
                        Norm::Group { gamma, beta, .. } => {
                            f("gamma", gamma);
                            f("beta", beta);
                        }
                    }
                }
                BlockRef::Rnn(c) => {
                    f("w_ih", c.w_ih.data());
                    f("w_hh", c.w_hh.data());
                    f("bias", c.bias.data());
                }
            }
        }
    }

    /// Bitwise parameter equality.
    pub fn params_bit_eq(&self, other: &Model) -> bool {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.for_each_param(|_, v| a.extend(v.iter().map(|x| x.to_bits())));
        other.for_each_param(|_, v| b.extend(v.iter().map(|x| x.to_bits())));
        a == b
    }
}

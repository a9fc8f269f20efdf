//! Channel-space analysis.
//!
//! Every tensor flowing between blocks lives in a *space*: a set of channels
//! that some blocks write (producers) and some blocks read (consumers). A
//! residual sum makes several blocks write the same channels; an inception
//! concat places producers side by side at different offsets. A *unit* is a
//! run of channels written by the same set of producers. Function-preserving
//! transforms act on whole units: every producer permutes/scales its output
//! axis and every consumer compensates on its input axis.

use crate::error::{Error, Result};
use crate::tensor::{Activation, PoolKind};

use super::{BlockId, BlockRef, Model, Node};

pub type SpaceId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub offset: usize,
    pub width: usize,
    pub producers: Vec<BlockId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Space {
    pub channels: usize,
    /// The model input; never transformed.
    pub fixed: bool,
    pub segments: Vec<Segment>,
    pub consumers: Vec<BlockId>,
    /// Activations applied to the whole space after producers write it
    /// (residual post-activations).
    pub post_acts: Vec<Activation>,
    merged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockInfo {
    pub input: SpaceId,
    /// `(space, channel offset)`; `None` for the head.
    pub output: Option<(SpaceId, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub members: Vec<BlockId>,
    pub space: SpaceId,
    pub offset: usize,
    pub width: usize,
    pub consumers: Vec<BlockId>,
    pub fixed: bool,
    pub post_acts: Vec<Activation>,
}

impl Unit {
    pub fn is_tied(&self) -> bool {
        self.members.len() > 1
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub spaces: Vec<Space>,
    pub blocks: Vec<BlockInfo>,
}

struct Builder {
    spaces: Vec<Space>,
    blocks: Vec<Option<BlockInfo>>,
    next: usize,
}

impl Builder {
    fn new_space(&mut self, channels: usize, producers: Vec<BlockId>) -> SpaceId {
        self.spaces.push(Space {
            channels,
            fixed: false,
            segments: vec![Segment {
                offset: 0,
                width: channels,
                producers,
            }],
            consumers: Vec::new(),
            post_acts: Vec::new(),
            merged: false,
        });
        self.spaces.len() - 1
    }

    /// Registers the next block reading `input` and writing a new space.
    fn block(&mut self, input: SpaceId, width: usize) -> SpaceId {
        let id = BlockId(self.next);
        self.next += 1;
        self.spaces[input].consumers.push(id);
        let s = self.new_space(width, vec![id]);
        self.blocks.push(Some(BlockInfo {
            input,
            output: Some((s, 0)),
        }));
        s
    }

    /// Moves every producer of `from` into `into` at `shift`.
    fn relocate(&mut self, from: SpaceId, into: SpaceId, shift: usize) {
        let segs = std::mem::take(&mut self.spaces[from].segments);
        self.spaces[from].merged = true;
        for seg in segs {
            for p in &seg.producers {
                let info = self.blocks[p.0].as_mut().unwrap();
                let (_, off) = info.output.unwrap();
                info.output = Some((into, off + shift));
            }
            self.spaces[into].segments.push(Segment {
                offset: seg.offset + shift,
                ..seg
            });
        }
    }

    /// Collapses all segments of `s` into one covering the whole space.
    fn tie_all(&mut self, s: SpaceId) {
        let c = self.spaces[s].channels;
        let mut producers: Vec<BlockId> = self.spaces[s]
            .segments
            .drain(..)
            .flat_map(|seg| seg.producers)
            .collect();
        producers.sort();
        for p in &producers {
            self.blocks[p.0].as_mut().unwrap().output = Some((s, 0));
        }
        self.spaces[s].segments.push(Segment {
            offset: 0,
            width: c,
            producers,
        });
    }
}

impl Topology {
    pub fn of(model: &Model) -> Result<Self> {
        let input_channels = match model.input_shape.as_slice() {
            [c, _, _] => *c,
            [_, d] => *d,
            other => return Err(Error::Topology(format!("unsupported input shape {other:?}"))),
        };
        let mut b = Builder {
            spaces: Vec::new(),
            blocks: Vec::new(),
            next: 0,
        };
        let mut cur = b.new_space(input_channels, Vec::new());
        b.spaces[cur].fixed = true;

        for node in &model.nodes {
            match node {
                Node::Block(blk) => cur = b.block(cur, blk.out_channels()),
                Node::Rnn(c) => cur = b.block(cur, c.hidden()),
                Node::GlobalPool => {}
                Node::Residual(r) => {
                    let x = cur;
                    let mut h = x;
                    for blk in &r.body {
                        h = b.block(h, blk.out_channels());
                    }
                    if r.body.is_empty() {
                        return Err(Error::Topology("residual with empty body".into()));
                    }
                    match &r.shortcut {
                        Some(sc) => {
                            let s = b.block(x, sc.out_channels());
                            b.relocate(s, h, 0);
                            b.tie_all(h);
                            cur = h;
                        }
                        None => {
                            b.relocate(h, x, 0);
                            b.tie_all(x);
                            cur = x;
                        }
                    }
                    b.spaces[cur].post_acts.push(r.post_act);
                }
                Node::Inception(inc) => {
                    let mut finals = Vec::new();
                    for br in &inc.branches {
                        if br.is_empty() {
                            return Err(Error::Topology("inception branch without blocks".into()));
                        }
                        let mut h = cur;
                        for blk in br {
                            h = b.block(h, blk.out_channels());
                        }
                        finals.push(h);
                    }
                    let total = finals.iter().map(|&s| b.spaces[s].channels).sum();
                    let cat = b.new_space(total, Vec::new());
                    b.spaces[cat].segments.clear();
                    let mut off = 0;
                    for s in finals {
                        let w = b.spaces[s].channels;
                        b.relocate(s, cat, off);
                        off += w;
                    }
                    cur = cat;
                }
            }
        }
        let head = BlockId(b.next);
        b.spaces[cur].consumers.push(head);
        b.blocks.push(Some(BlockInfo {
            input: cur,
            output: None,
        }));
        Ok(Topology {
            spaces: b.spaces,
            blocks: b.blocks.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn head(&self) -> BlockId {
        BlockId(self.blocks.len() - 1)
    }

    pub fn info(&self, id: BlockId) -> Option<&BlockInfo> {
        self.blocks.get(id.0)
    }

    /// All transformable-or-not producer units, ordered by first member.
    pub fn units(&self) -> Vec<Unit> {
        let mut out = Vec::new();
        for (sid, sp) in self.spaces.iter().enumerate() {
            if sp.merged {
                continue;
            }
            for seg in &sp.segments {
                if seg.producers.is_empty() {
                    continue;
                }
                let mut members = seg.producers.clone();
                members.sort();
                out.push(Unit {
                    members,
                    space: sid,
                    offset: seg.offset,
                    width: seg.width,
                    consumers: sp.consumers.clone(),
                    fixed: sp.fixed,
                    post_acts: sp.post_acts.clone(),
                });
            }
        }
        out.sort_by_key(|u| u.members[0]);
        out
    }

    pub fn unit_of(&self, id: BlockId) -> Result<Unit> {
        if id == self.head() {
            return Err(Error::NoOutgoing(id));
        }
        self.units()
            .into_iter()
            .find(|u| u.members.contains(&id))
            .ok_or_else(|| Error::Topology(format!("block {id} has no output unit")))
    }

    /// Constraint groups: units with more than one producer.
    pub fn tied_groups(&self) -> Vec<Vec<BlockId>> {
        self.units()
            .into_iter()
            .filter(Unit::is_tied)
            .map(|u| u.members)
            .collect()
    }
}

/// Per-block `(in, out)` widths; plans record it to reject foreign models.
pub fn fingerprint(model: &Model) -> Vec<[usize; 2]> {
    (0..model.num_blocks())
        .map(|i| match model.block(BlockId(i)).unwrap() {
            BlockRef::Conv(b) => [b.in_channels(), b.out_channels()],
            BlockRef::Rnn(c) => [c.w_ih.dim(0), c.hidden()],
        })
        .collect()
}

/// True if the block ends in max pooling.
pub fn has_max_pool(model: &Model, id: BlockId) -> bool {
    matches!(
        model.conv(id).and_then(|b| b.pool),
        Some(p) if p.kind == PoolKind::Max
    )
}

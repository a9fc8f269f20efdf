//! NWM1 model container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NWM1"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       8     manifest length M in bytes, u64 little-endian
//! 16      M     manifest, UTF-8 JSON
//! 16+M    ...   payload: little-endian f64 values, no padding
//! ```
//!
//! The manifest describes the node graph; every tensor appears as
//! `{"shape": [...], "offset": k}` where `k` counts f64 elements from the
//! start of the payload. `payload_bytes` must equal the bytes that follow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, PoolSpec, Tensor};

use super::{ConvBlock, Inception, Model, Node, Norm, Residual, RnnCell};

pub const CONTAINER_MAGIC: [u8; 4] = *b"NWM1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TRef {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NormM {
    None,
    Batch { gamma: TRef, beta: TRef, mean: TRef, std: TRef },
    Group { gamma: TRef, beta: TRef, groups: usize },
}

#[derive(Serialize, Deserialize)]
struct BlockM {
    weight: TRef,
    bias: TRef,
    norm: NormM,
    act: Activation,
    pool: Option<PoolSpec>,
    stride: usize,
    padding: usize,
    mask: Option<TRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeM {
    Block { block: BlockM },
    Residual { body: Vec<BlockM>, shortcut: Option<BlockM>, post_act: Activation },
    Inception { branches: Vec<Vec<BlockM>> },
    GlobalPool,
    Rnn { w_ih: TRef, w_hh: TRef, bias: TRef },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: String,
    input_shape: Vec<usize>,
    nodes: Vec<NodeM>,
    head: BlockM,
    payload_bytes: usize,
}

#[derive(Default)]
struct Packer {
    payload: Vec<f64>,
}

impl Packer {
    fn put(&mut self, shape: &[usize], data: &[f64]) -> TRef {
        let offset = self.payload.len();
        self.payload.extend_from_slice(data);
        TRef {
            shape: shape.to_vec(),
            offset,
        }
    }

    fn t(&mut self, t: &Tensor) -> TRef {
        self.put(t.shape(), t.data())
    }

    fn v(&mut self, v: &[f64]) -> TRef {
        self.put(&[v.len()], v)
    }

    fn block(&mut self, b: &ConvBlock) -> BlockM {
        BlockM {
            weight: self.t(&b.weight),
            bias: self.t(&b.bias),
            norm: match &b.norm {
                Norm::None => NormM::None,
                Norm::Batch { gamma, beta, mean, std } => NormM::Batch {
                    gamma: self.v(gamma),
                    beta: self.v(beta),
                    mean: self.v(mean),
                    std: self.v(std),
                },
                Norm::Group { gamma, beta, groups } => NormM::Group {
                    gamma: self.v(gamma),
                    beta: self.v(beta),
                    groups: *groups,
                },
            },
            act: b.act,
            pool: b.pool,
            stride: b.stride,
            padding: b.padding,
            mask: b.mask.as_ref().map(|m| self.t(m)),
        }
    }
}

pub fn write_model(model: &Model) -> Result<Vec<u8>> {
    let mut p = Packer::default();
    let nodes = model
        .nodes
        .iter()
        .map(|n| match n {
            Node::Block(b) => NodeM::Block { block: p.block(b) },
            Node::Residual(r) => NodeM::Residual {
                body: r.body.iter().map(|b| p.block(b)).collect(),
                shortcut: r.shortcut.as_ref().map(|b| p.block(b)),
                post_act: r.post_act,
            },
            Node::Inception(inc) => NodeM::Inception {
                branches: inc
                    .branches
                    .iter()
                    .map(|br| br.iter().map(|b| p.block(b)).collect())
                    .collect(),
            },
            Node::GlobalPool => NodeM::GlobalPool,
            Node::Rnn(c) => NodeM::Rnn {
                w_ih: p.t(&c.w_ih),
                w_hh: p.t(&c.w_hh),
                bias: p.t(&c.bias),
            },
        })
        .collect();
    let head = p.block(&model.head);
    let manifest = Manifest {
        arch: model.arch.clone(),
        input_shape: model.input_shape.clone(),
        nodes,
        head,
        payload_bytes: p.payload.len() * 8,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + manifest.payload_bytes);
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &p.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Unpacker {
    payload: Vec<f64>,
}

impl Unpacker {
    fn t(&self, r: &TRef) -> Result<Tensor> {
        let n: usize = r.shape.iter().product();
        let end = r.offset.checked_add(n).filter(|&e| e <= self.payload.len()).ok_or_else(|| {
            Error::Manifest(format!(
                "tensor at offset {} with {n} elements exceeds payload of {}",
                r.offset,
                self.payload.len()
            ))
        })?;
        Tensor::new(r.shape.clone(), self.payload[r.offset..end].to_vec())
    }

    fn v(&self, r: &TRef) -> Result<Vec<f64>> {
        if r.shape.len() != 1 {
            return Err(Error::Manifest(format!("expected a vector, got shape {:?}", r.shape)));
        }
        Ok(self.t(r)?.into_data())
    }

    fn block(&self, b: &BlockM) -> Result<ConvBlock> {
        let weight = self.t(&b.weight)?;
        if weight.rank() != 4 {
            return Err(Error::Manifest(format!("weight must be rank 4, got {:?}", weight.shape())));
        }
        let cout = weight.dim(1);
        let bias = self.t(&b.bias)?;
        let check = |name: &str, len: usize| {
            if len == cout {
                Ok(())
            } else {
                Err(Error::Manifest(format!("{name} has {len} entries for {cout} channels")))
            }
        };
        check("bias", bias.len())?;
        let norm = match &b.norm {
            NormM::None => Norm::None,
            NormM::Batch { gamma, beta, mean, std } => {
                let n = Norm::Batch {
                    gamma: self.v(gamma)?,
                    beta: self.v(beta)?,
                    mean: self.v(mean)?,
                    std: self.v(std)?,
                };
                if let Norm::Batch { gamma, beta, mean, std } = &n {
                    for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("std", std)] {
                        check(name, v.len())?;
                    }
                }
                n
            }
            NormM::Group { gamma, beta, groups } => {
                let (g, be) = (self.v(gamma)?, self.v(beta)?);
                check("gamma", g.len())?;
                check("beta", be.len())?;
                if *groups == 0 || cout % groups != 0 {
                    return Err(Error::Divisibility {
                        channels: cout,
                        groups: *groups,
                    });
                }
                Norm::Group {
                    gamma: g,
                    beta: be,
                    groups: *groups,
                }
            }
        };
        let mask = match &b.mask {
            Some(r) => {
                let m = self.t(r)?;
                if m.shape() != weight.shape() {
                    return Err(Error::Manifest("mask shape differs from weight".into()));
                }
                Some(m)
            }
            None => None,
        };
        Ok(ConvBlock {
            weight,
            bias,
            norm,
            act: b.act,
            pool: b.pool,
            stride: b.stride,
            padding: b.padding,
            mask,
        })
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    let header = |end: usize| {
        bytes.get(..end).ok_or(Error::Truncated {
            needed: end,
            available: bytes.len(),
        })
    };
    let magic: [u8; 4] = header(4)?.try_into().unwrap();
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(header(8)?[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(header(16)?[8..16].try_into().unwrap()) as usize;
    let mend = 16usize.checked_add(mlen).ok_or(Error::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    let manifest: Manifest = serde_json::from_slice(&header(mend)?[16..]).map_err(|e| Error::Manifest(e.to_string()))?;
    let rest = &bytes[mend..];
    if rest.len() < manifest.payload_bytes {
        return Err(Error::Truncated {
            needed: manifest.payload_bytes,
            available: rest.len(),
        });
    }
    if rest.len() != manifest.payload_bytes || !manifest.payload_bytes.is_multiple_of(8) {
        return Err(Error::LengthMismatch {
            declared: manifest.payload_bytes,
            actual: rest.len(),
        });
    }
    let u = Unpacker {
        payload: rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let nodes = manifest
        .nodes
        .iter()
        .map(|n| {
            Ok(match n {
                NodeM::Block { block } => Node::Block(u.block(block)?),
                NodeM::Residual { body, shortcut, post_act } => Node::Residual(Residual {
                    body: body.iter().map(|b| u.block(b)).collect::<Result<_>>()?,
                    shortcut: shortcut.as_ref().map(|b| u.block(b)).transpose()?,
                    post_act: *post_act,
                }),
                NodeM::Inception { branches } => Node::Inception(Inception {
                    branches: branches
                        .iter()
                        .map(|br| br.iter().map(|b| u.block(b)).collect::<Result<_>>())
                        .collect::<Result<_>>()?,
                }),
                NodeM::GlobalPool => Node::GlobalPool,
                NodeM::Rnn { w_ih, w_hh, bias } => Node::Rnn(RnnCell {
                    w_ih: u.t(w_ih)?,
                    w_hh: u.t(w_hh)?,
                    bias: u.t(bias)?,
                }),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        arch: manifest.arch,
        input_shape: manifest.input_shape,
        nodes,
        head: u.block(&manifest.head)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_toy_model, Arch};

    fn bytes() -> Vec<u8> {
        write_model(&gen_toy_model(Arch::PlainCnn, Some(&[4, 4, 4, 4, 8]), 1).unwrap()).unwrap()
    }

    #[test]
    fn bad_magic() {
        let mut b = bytes();
        b[0] = b'X';
        assert!(matches!(read_model(&b), Err(Error::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = bytes();
        b[4] = 9;
        assert!(matches!(read_model(&b), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn truncated_payload() {
        let b = bytes();
        assert!(matches!(read_model(&b[..b.len() - 8]), Err(Error::Truncated { .. })));
        assert!(matches!(read_model(&b[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes() {
        let mut b = bytes();
        b.extend_from_slice(&[0; 8]);
        assert!(matches!(read_model(&b), Err(Error::LengthMismatch { .. })));
    }
}

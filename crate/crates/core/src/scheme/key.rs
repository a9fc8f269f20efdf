//! Watermark keys and their JSON file format.
//!
//! ```json
//! {
//!   "format": "neuroscrub-key",
//!   "version": 1,
//!   "scheme": "uchida",
//!   "signature": "0111010001101000...",
//!   "carrier": { "blocks": [7], "indices": [] },
//!   "payload": { "kind": "uchida", "projection": { "shape": [160, 576], "data": "<base64>" } }
//! }
//! ```
//!
//! Tensors store their shape plus standard base64 (with padding) of the
//! little-endian f64 values in row-major order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockId;
use crate::tensor::Tensor;

use super::codec::SignatureBits;
use super::mlp::Mlp;

pub const KEY_FORMAT: &str = "neuroscrub-key";
pub const KEY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uchida,
    Riga,
    ScaleSign,
    GreedyResiduals,
    LotteryMask,
    Deepsigns,
    IprIc,
    Deepipr,
    PassportAware,
}

impl Scheme {
    pub const ALL: [Scheme; 9] = [
        Scheme::Uchida,
        Scheme::Riga,
        Scheme::ScaleSign,
        Scheme::GreedyResiduals,
        Scheme::LotteryMask,
        Scheme::Deepsigns,
        Scheme::IprIc,
        Scheme::Deepipr,
        Scheme::PassportAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Uchida => "uchida",
            Scheme::Riga => "riga",
            Scheme::ScaleSign => "scale_sign",
            Scheme::GreedyResiduals => "greedy_residuals",
            Scheme::LotteryMask => "lottery_mask",
            Scheme::Deepsigns => "deepsigns",
            Scheme::IprIc => "ipr_ic",
            Scheme::Deepipr => "deepipr",
            Scheme::PassportAware => "passport_aware",
        }
    }

    /// Schemes with a private passport branch.
    pub fn has_private_branch(self) -> bool {
        matches!(self, Scheme::Deepipr | Scheme::PassportAware)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

/// Which parameters carry the signature: the blocks, and for direct-readout
/// schemes the positions in the concatenated carrier vector that hold bit
/// `t`. Empty `indices` means the whole carrier feeds a projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrierSelector {
    pub blocks: Vec<BlockId>,
    #[serde(default)]
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Uchida {
        /// `[T, D]` Gaussian projection of the mean kernel.
        #[serde(with = "b64")]
        projection: Tensor,
    },
    Riga {
        extractor: Mlp,
    },
    ScaleSign,
    GreedyResiduals {
        /// Fraction of pooled entries kept per row.
        eta: f64,
        pool_width: usize,
    },
    LotteryMask {
        /// Seeds the bits written at non-signature mask positions.
        filler_seed: u64,
    },
    Deepsigns {
        /// `[T, C]`.
        #[serde(with = "b64")]
        projection: Tensor,
        #[serde(with = "b64_vec")]
        triggers: Vec<Tensor>,
    },
    IprIc {
        /// `[L, D]` trigger sequence.
        #[serde(with = "b64")]
        trigger: Tensor,
    },
    Deepipr {
        #[serde(with = "b64_vec")]
        passports_gamma: Vec<Tensor>,
        #[serde(with = "b64_vec")]
        passports_beta: Vec<Tensor>,
    },
    PassportAware {
        #[serde(with = "b64_vec")]
        passports_gamma: Vec<Tensor>,
        #[serde(with = "b64_vec")]
        passports_beta: Vec<Tensor>,
        gen_gamma: Vec<Mlp>,
        gen_beta: Vec<Mlp>,
        /// `[T, C_total]`.
        #[serde(with = "b64")]
        projection: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub format: String,
    pub version: u32,
    pub scheme: Scheme,
    pub signature: SignatureBits,
    pub carrier: CarrierSelector,
    pub payload: Payload,
}

impl WatermarkKey {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let key: WatermarkKey = serde_json::from_str(s).map_err(|e| Error::Key(e.to_string()))?;
        if key.format != KEY_FORMAT {
            return Err(Error::Key(format!("unexpected format tag `{}`", key.format)));
        }
        if key.version != KEY_VERSION {
            return Err(Error::Version {
                found: key.version,
                expected: KEY_VERSION,
            });
        }
        Ok(key)
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    #[derive(Serialize, Deserialize)]
    pub(crate) struct Encoded {
        shape: Vec<usize>,
        data: String,
    }

    pub(crate) fn encode(t: &Tensor) -> Encoded {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Encoded {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub(crate) fn decode(e: Encoded) -> Result<Tensor, String> {
        let bytes = STANDARD.decode(e.data.as_bytes()).map_err(|err| err.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(e.shape, data).map_err(|err| err.to_string())
    }

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        encode(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        decode(Encoded::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod b64_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::b64::{decode, encode, Encoded};
    use crate::tensor::Tensor;

    pub fn serialize<S: Serializer>(v: &[Tensor], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(encode).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Tensor>, D::Error> {
        Vec::<Encoded>::deserialize(d)?
            .into_iter()
            .map(|e| decode(e).map_err(serde::de::Error::custom))
            .collect()
    }
}

use thiserror::Error;

use crate::model::BlockId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("non-positive std {value} at channel {channel}")]
    NonPositiveStd { channel: usize, value: f64 },

    #[error("{groups} groups do not divide {channels} channels")]
    Divisibility { channels: usize, groups: usize },

    #[error("neuron address out of range: block {block:?}, neuron {neuron}")]
    AddressOutOfRange { block: BlockId, neuron: usize },

    #[error("block {0:?} is the output head and has no outgoing weights")]
    NoOutgoing(BlockId),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("group structure violated on block {block:?}: {msg}")]
    GroupStructure { block: BlockId, msg: String },

    #[error("non-positive scale factor {value} at neuron {neuron}")]
    NonPositiveScale { neuron: usize, value: f64 },

    #[error("{transform} is not applicable to block {block:?}: {reason}")]
    IllegalTransform {
        transform: &'static str,
        block: BlockId,
        reason: String,
    },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("unsupported topology: {0}")]
    Topology(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("manifest declares {declared} payload bytes but {actual} are present")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed key: {0}")]
    Key(String),

    #[error("scheme {scheme} cannot use this model: {reason}")]
    Incompatible { scheme: &'static str, reason: String },

    #[error("carrier selector out of range: {0}")]
    CarrierOutOfRange(String),

    #[error("embedding did not converge: final BER {ber}")]
    NonConvergent { ber: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthDiffers { left: usize, right: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::InvalidShape { .. } => "shape",
            Error::NonPositiveStd { .. } => "non_positive_std",
            Error::Divisibility { .. } => "divisibility",
            Error::AddressOutOfRange { .. } => "address_out_of_range",
            Error::NoOutgoing(_) => "no_outgoing",
            Error::InvalidPermutation(_) => "invalid_permutation",
            Error::GroupStructure { .. } => "group_structure",
            Error::NonPositiveScale { .. } => "non_positive_scale",
            Error::IllegalTransform { .. } => "illegal_transform",
            Error::TopologyMismatch(_) => "topology_mismatch",
            Error::Topology(_) => "topology",
            Error::UnknownArch(_) => "unknown_arch",
            Error::UnknownScheme(_) => "unknown_scheme",
            Error::BadMagic(_) => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Manifest(_) => "manifest",
            Error::Key(_) => "key",
            Error::Incompatible { .. } => "incompatible",
            Error::CarrierOutOfRange(_) => "carrier_out_of_range",
            Error::NonConvergent { .. } => "non_convergent",
            Error::LengthDiffers { .. } => "length_differs",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

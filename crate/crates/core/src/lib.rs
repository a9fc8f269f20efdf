//! Function-preserving neuron transforms and the white-box watermark schemes
//! they defeat.
//!
//! The crate is organized bottom-up: [`tensor`] kernels, the [`model`] graph
//! with its NWM1 container and toy architectures, the [`transform`] family
//! (shuffle, scale, sign flip, randomized attack and exact inversion), the
//! [`scheme`] embed/extract implementations, and [`equiv`] certificates.

pub mod equiv;
pub mod error;
pub mod model;
pub mod rng;
pub mod scheme;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};

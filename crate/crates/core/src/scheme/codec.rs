//! Signature bit strings, the ASCII codec, BER and the readout threshold.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::Prng;

/// Ordered signature bits. Serialized as a string of `0`/`1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignatureBits(pub Vec<bool>);

impl SignatureBits {
    /// Eight bits per byte, most significant bit first.
    pub fn from_text(text: &str) -> Self {
        SignatureBits(
            text.bytes()
                .flat_map(|b| (0..8).rev().map(move |k| (b >> k) & 1 == 1))
                .collect(),
        )
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        SignatureBits((0..n).map(|_| rng.bit()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Bytes from consecutive 8-bit groups; a trailing partial group is
    /// dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .chunks_exact(8)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8))
            .collect()
    }

    /// Text rendering: each byte as its Latin-1 character, with control
    /// characters shown as `.`.
    pub fn to_text_lossy(&self) -> String {
        self.to_bytes()
            .into_iter()
            .map(|b| {
                let c = b as char;
                if c.is_control() {
                    '.'
                } else {
                    c
                }
            })
            .collect()
    }
}

impl fmt::Display for SignatureBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SignatureBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Key(format!("signature contains `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(SignatureBits)
    }
}

impl Serialize for SignatureBits {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SignatureBits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Positive values read as 1; zero and negative as 0.
pub fn threshold(v: &[f64]) -> SignatureBits {
    SignatureBits(v.iter().map(|&x| x > 0.0).collect())
}

/// Fraction of differing positions.
pub fn ber(a: &SignatureBits, b: &SignatureBits) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthDiffers {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_msb_first() {
        let s = SignatureBits::from_text("A");
        assert_eq!(s.to_string(), "01000001");
        assert_eq!(s.to_text_lossy(), "A");
    }

    #[test]
    fn threshold_zero_is_zero() {
        assert_eq!(threshold(&[0.0, -0.0, 1e-300, -2.0]).to_string(), "0010");
    }

    #[test]
    fn ber_errors_on_length() {
        let a = SignatureBits(vec![true]);
        let b = SignatureBits(vec![true, false]);
        assert!(matches!(ber(&a, &b), Err(Error::LengthDiffers { .. })));
    }

    #[test]
    fn parse_rejects_other_chars() {
        assert!("0102".parse::<SignatureBits>().is_err());
        assert_eq!("0110".parse::<SignatureBits>().unwrap().ones(), 2);
    }
}

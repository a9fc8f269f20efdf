//! Randomized removal attack: for every unit, pick a fraction `alpha` of its
//! neurons and shuffle, rescale and sign-flip them.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::topology::{fingerprint, Topology};
use crate::model::Model;
use crate::rng::Prng;

use super::{
    check_scale, flip_block, flip_path, scale_unit, shuffle_unit, unit_group_size, TransformPlan, UnitRecord,
    PLAN_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSet {
    pub shuffle: bool,
    pub scale: bool,
    pub flip: bool,
}

impl TransformSet {
    pub const ALL: TransformSet = TransformSet {
        shuffle: true,
        scale: true,
        flip: true,
    };
    pub const NONE: TransformSet = TransformSet {
        shuffle: false,
        scale: false,
        flip: false,
    };

    pub fn label(self) -> String {
        if self == Self::ALL {
            return "unified".into();
        }
        if self == Self::NONE {
            return "none".into();
        }
        let mut parts = Vec::new();
        if self.shuffle {
            parts.push("ls");
        }
        if self.scale {
            parts.push("ns");
        }
        if self.flip {
            parts.push("sf");
        }
        parts.join("+")
    }
}

impl FromStr for TransformSet {
    type Err = Error;

    /// Comma or plus separated list of `ls`, `ns`, `sf`; also `unified`/`all`
    /// and `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = TransformSet::NONE;
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "ls" | "shuffle" => t.shuffle = true,
                "ns" | "scale" => t.scale = true,
                "sf" | "flip" => t.flip = true,
                "unified" | "all" => t = TransformSet::ALL,
                "none" => {}
                other => {
                    return Err(Error::Manifest(format!(
                        "unknown transform `{other}` (expected ls, ns, sf, unified, none)"
                    )))
                }
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `2^e`, `e` uniform on `-16..=16` (sign and magnitude drawn separately).
    PowerOfTwo,
    /// `2^u`, `u` uniform on `[-16, 16)`.
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub seed: u64,
    pub alpha: f64,
    pub transforms: TransformSet,
    pub scale_mode: ScaleMode,
}

impl AttackConfig {
    pub fn unified(seed: u64, alpha: f64) -> Self {
        AttackConfig {
            seed,
            alpha,
            transforms: TransformSet::ALL,
            scale_mode: ScaleMode::PowerOfTwo,
        }
    }
}

fn draw_scale(rng: &mut Prng, mode: ScaleMode) -> f64 {
    match mode {
        ScaleMode::PowerOfTwo => {
            let e = rng.below(17) as i32;
            let sign = if rng.bit() { -1 } else { 1 };
            2f64.powi(sign * e)
        }
        ScaleMode::Continuous => rng.uniform_in(-16.0, 16.0).exp2(),
    }
}

pub fn unified_attack(model: &Model, seed: u64, alpha: f64) -> Result<(Model, TransformPlan)> {
    attack(model, &AttackConfig::unified(seed, alpha))
}

pub fn attack(model: &Model, cfg: &AttackConfig) -> Result<(Model, TransformPlan)> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Manifest(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    let topo = Topology::of(model)?;
    let mut rng = Prng::new(cfg.seed);
    let mut out = model.clone();
    let mut records = Vec::new();

    for unit in topo.units() {
        let n = unit.width;
        let gsize = unit_group_size(model, &unit)?.unwrap_or(1);
        let groups = n / gsize;
        let k = (cfg.alpha * groups as f64).round() as usize;
        let mut chosen = rng.choose(groups, k);
        chosen.sort_unstable();
        if chosen.is_empty() {
            continue;
        }
        let neurons: Vec<usize> = chosen.iter().flat_map(|&g| g * gsize..(g + 1) * gsize).collect();

        // Draw everything up front so the stream does not depend on legality.
        let outer = rng.permutation(chosen.len());
        let inner: Vec<Vec<usize>> = (0..chosen.len()).map(|_| rng.permutation(gsize)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for (a, &g) in chosen.iter().enumerate() {
            let dest = chosen[outer[a]];
            for r in 0..gsize {
                perm[g * gsize + r] = dest * gsize + inner[a][r];
            }
        }
        let mut scale = vec![1.0; n];
        let mut sign = vec![1i8; n];
        for &g in &chosen {
            let l = draw_scale(&mut rng, cfg.scale_mode);
            let s = if rng.bit() { -1 } else { 1 };
            for r in 0..gsize {
                scale[g * gsize + r] = l;
                sign[g * gsize + r] = s;
            }
        }

        let mut rec = UnitRecord {
            members: unit.members.clone(),
            neurons,
            perm: None,
            scale: None,
            sign: None,
            flipped: Vec::new(),
            skipped: Vec::new(),
        };
        if cfg.transforms.shuffle {
            match shuffle_unit(&mut out, &unit, &perm) {
                Ok(()) => rec.perm = Some(perm),
                Err(e) => rec.skipped.push(format!("shuffle: {e}")),
            }
        }
        if cfg.transforms.scale {
            match check_scale(&out, &unit, &scale) {
                Ok(()) => {
                    scale_unit(&mut out, &unit, &scale, false);
                    rec.scale = Some(scale);
                }
                Err(e) => rec.skipped.push(format!("scale: {e}")),
            }
        }
        if cfg.transforms.flip {
            for &b in &unit.members {
                match flip_path(&out, &topo, b, &sign) {
                    Ok(path) => {
                        flip_block(&mut out, &topo, b, &sign, path);
                        rec.flipped.push(b);
                    }
                    Err(e) => rec.skipped.push(format!("flip: {e}")),
                }
            }
            if !rec.flipped.is_empty() {
                rec.sign = Some(sign);
            }
        }
        records.push(rec);
    }

    let plan = TransformPlan {
        version: PLAN_VERSION,
        seed: cfg.seed,
        alpha: cfg.alpha,
        transforms: cfg.transforms,
        scale_mode: cfg.scale_mode,
        fingerprint: fingerprint(model),
        units: records,
    };
    Ok((out, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_set_parsing() {
        assert_eq!("ls,ns,sf".parse::<TransformSet>().unwrap(), TransformSet::ALL);
        assert_eq!("unified".parse::<TransformSet>().unwrap(), TransformSet::ALL);
        let t: TransformSet = "sf".parse().unwrap();
        assert!(t.flip && !t.scale && !t.shuffle);
        assert!("xx".parse::<TransformSet>().is_err());
        assert_eq!(TransformSet::ALL.label(), "unified");
        assert_eq!("ns+sf".parse::<TransformSet>().unwrap().label(), "ns+sf");
    }

    #[test]
    fn power_of_two_scales() {
        let mut rng = Prng::new(2);
        for _ in 0..1000 {
            let l = draw_scale(&mut rng, ScaleMode::PowerOfTwo);
            let e = l.log2();
            assert_eq!(e, e.round());
            assert!(e.abs() <= 16.0);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::topology::{fingerprint, Topology, Unit};
use crate::model::{BlockId, Model};

use super::{
    check_scale, flip_block, flip_path, inverse_perm, scale_unit, shuffle_unit, ScaleMode, TransformSet,
};

pub const PLAN_VERSION: u32 = 1;

/// What was done to one unit, in application order: shuffle, scale, flip.
/// Vectors are indexed by neuron position *after* the preceding steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub members: Vec<BlockId>,
    /// Neurons selected for modification (before the shuffle).
    pub neurons: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign: Option<Vec<i8>>,
    /// Members whose signs were flipped (a subset when some cannot be).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flipped: Vec<BlockId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub version: u32,
    pub seed: u64,
    pub alpha: f64,
    pub transforms: TransformSet,
    pub scale_mode: ScaleMode,
    /// Per-block `[in, out]` widths of the model the plan was drawn for.
    pub fingerprint: Vec<[usize; 2]>,
    pub units: Vec<UnitRecord>,
}

impl TransformPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: TransformPlan = serde_json::from_str(s)?;
        if plan.version != PLAN_VERSION {
            return Err(Error::Version {
                found: plan.version,
                expected: PLAN_VERSION,
            });
        }
        Ok(plan)
    }
}

fn check_fingerprint(model: &Model, plan: &TransformPlan) -> Result<()> {
    let fp = fingerprint(model);
    if fp != plan.fingerprint {
        return Err(Error::TopologyMismatch(format!(
            "plan drawn for {} blocks with widths {:?}, model has {} blocks with widths {:?}",
            plan.fingerprint.len(),
            plan.fingerprint,
            fp.len(),
            fp
        )));
    }
    Ok(())
}

fn unit_for(topo: &Topology, rec: &UnitRecord) -> Result<Unit> {
    let unit = topo.unit_of(rec.members[0])?;
    if unit.members != rec.members {
        return Err(Error::TopologyMismatch(format!(
            "unit {:?} recorded, model ties {:?}",
            rec.members, unit.members
        )));
    }
    Ok(unit)
}

/// Replays a plan on a model with the same topology.
pub fn apply_plan(model: &Model, plan: &TransformPlan) -> Result<Model> {
    check_fingerprint(model, plan)?;
    let topo = Topology::of(model)?;
    let mut out = model.clone();
    for rec in &plan.units {
        let unit = unit_for(&topo, rec)?;
        if let Some(p) = &rec.perm {
            shuffle_unit(&mut out, &unit, p)?;
        }
        if let Some(l) = &rec.scale {
            check_scale(&out, &unit, l)?;
            scale_unit(&mut out, &unit, l, false);
        }
        if let Some(s) = &rec.sign {
            for &b in &rec.flipped {
                let path = flip_path(&out, &topo, b, s)?;
                flip_block(&mut out, &topo, b, s, path);
            }
        }
    }
    Ok(out)
}

/// Undoes a plan: units in reverse order, and within a unit flip, then
/// inverse scale, then inverse shuffle. Exact (bitwise) when all scales are
/// powers of two.
pub fn invert_plan(model: &Model, plan: &TransformPlan) -> Result<Model> {
    check_fingerprint(model, plan)?;
    let topo = Topology::of(model)?;
    let mut out = model.clone();
    for rec in plan.units.iter().rev() {
        let unit = unit_for(&topo, rec)?;
        if let Some(s) = &rec.sign {
            for &b in &rec.flipped {
                let path = flip_path(&out, &topo, b, s)?;
                flip_block(&mut out, &topo, b, s, path);
            }
        }
        if let Some(l) = &rec.scale {
            check_scale(&out, &unit, l)?;
            scale_unit(&mut out, &unit, l, true);
        }
        if let Some(p) = &rec.perm {
            shuffle_unit(&mut out, &unit, &inverse_perm(p))?;
        }
    }
    Ok(out)
}

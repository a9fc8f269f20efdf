//! Output-equivalence certificates between two classifiers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// `n` standard-normal tensors of `shape`, drawn sequentially from one
/// [`Prng`] stream seeded with `seed` (element order is row-major, input
/// after input).
pub fn sample_inputs(seed: u64, n: usize, shape: &[usize]) -> Vec<Tensor> {
    let mut rng = Prng::new(seed);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| Tensor::new(shape.to_vec(), rng.normals(len)).expect("sized by shape"))
        .collect()
}

/// Draws `n` inputs whose argmax under `model` is spread evenly over the
/// classes (quota `n / K`, remainder to the lowest classes). Against such a
/// set, any predictor that ignores its input agrees with `model` on exactly
/// `1 / K` of the inputs. A class the model rarely predicts may stay short
/// after `max_draws` candidates; its slots then go to leftover candidates in
/// draw order.
pub fn class_balanced_inputs(
    model: &dyn Classifier,
    seed: u64,
    n: usize,
    shape: &[usize],
    max_draws: usize,
) -> Result<Vec<Tensor>> {
    const CHUNK: usize = 64;
    let mut rng = Prng::new(seed);
    let len: usize = shape.iter().product();
    let mut quota: Vec<usize> = Vec::new();
    let mut picked = Vec::new();
    let mut spare = Vec::new();
    let mut drawn = 0;
    while picked.len() < n && drawn < max_draws {
        let chunk: Vec<Tensor> = (0..CHUNK.min(max_draws - drawn))
            .map(|_| Tensor::new(shape.to_vec(), rng.normals(len)).expect("sized by shape"))
            .collect();
        drawn += chunk.len();
        let classes: Vec<(usize, usize)> = chunk
            .par_iter()
            .map(|x| model.logits(x).map(|l| (argmax(l.data()), l.len())))
            .collect::<Result<_>>()?;
        for (x, (c, k)) in chunk.into_iter().zip(classes) {
            if quota.is_empty() {
                quota = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
            }
            if quota[c] > 0 && picked.len() < n {
                quota[c] -= 1;
                picked.push(x);
            } else {
                spare.push(x);
            }
        }
    }
    picked.extend(spare.into_iter().take(n - picked.len()));
    Ok(picked)
}

pub trait Classifier: Sync {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tolerance {
    Bitwise,
    /// Element passes when `|a - b| <= abs + rel * |b|`.
    Relative { rel: f64, abs: f64 },
}

impl Tolerance {
    pub fn rel(rel: f64) -> Self {
        Tolerance::Relative { rel, abs: 0.0 }
    }

    fn accepts(self, a: f64, b: f64) -> bool {
        match self {
            Tolerance::Bitwise => a.to_bits() == b.to_bits(),
            Tolerance::Relative { rel, abs } => (a - b).abs() <= abs + rel * b.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub input: usize,
    pub logit: usize,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n_inputs: usize,
    pub tolerance: Tolerance,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub bitwise_equal: bool,
    pub top1_agreement: f64,
    pub first_divergence: Option<Divergence>,
    pub passed: bool,
}

/// Lowest index among maximal entries.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn paired(a: &dyn Classifier, b: &dyn Classifier, inputs: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
    let pairs: Vec<(Tensor, Tensor)> = inputs
        .par_iter()
        .map(|x| Ok((a.logits(x)?, b.logits(x)?)))
        .collect::<Result<_>>()?;
    for (l, r) in &pairs {
        if l.len() != r.len() {
            return Err(Error::LengthDiffers {
                left: l.len(),
                right: r.len(),
            });
        }
    }
    Ok(pairs)
}

pub fn compare(a: &dyn Classifier, b: &dyn Classifier, inputs: &[Tensor], tolerance: Tolerance) -> Result<EquivalenceReport> {
    let pairs = paired(a, b, inputs)?;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut bitwise = true;
    let mut agree = 0usize;
    let mut first = None;
    for (i, (l, r)) in pairs.iter().enumerate() {
        if argmax(l.data()) == argmax(r.data()) {
            agree += 1;
        }
        for (k, (&x, &y)) in l.data().iter().zip(r.data()).enumerate() {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            let rel = if d == 0.0 { 0.0 } else { d / y.abs() };
            max_rel = max_rel.max(rel);
            bitwise &= x.to_bits() == y.to_bits();
            if first.is_none() && !tolerance.accepts(x, y) {
                first = Some(Divergence {
                    input: i,
                    logit: k,
                    left: x,
                    right: y,
                });
            }
        }
    }
    let n = pairs.len();
    Ok(EquivalenceReport {
        n_inputs: n,
        tolerance,
        max_abs_dev: max_abs,
        max_rel_dev: max_rel,
        bitwise_equal: bitwise,
        top1_agreement: if n == 0 { 1.0 } else { agree as f64 / n as f64 },
        passed: first.is_none(),
        first_divergence: first,
    })
}

/// Fraction of inputs on which both classifiers predict the same class.
pub fn agreement(a: &dyn Classifier, b: &dyn Classifier, inputs: &[Tensor]) -> Result<f64> {
    let pairs = paired(a, b, inputs)?;
    if pairs.is_empty() {
        return Ok(1.0);
    }
    let same = pairs
        .iter()
        .filter(|(l, r)| argmax(l.data()) == argmax(r.data()))
        .count();
    Ok(same as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn tolerance_rule() {
        let t = Tolerance::Relative { rel: 1e-3, abs: 0.0 };
        assert!(t.accepts(1.0005, 1.0));
        assert!(!t.accepts(1.01, 1.0));
        assert!(!Tolerance::Bitwise.accepts(0.0, -0.0));
    }

    #[test]
    fn balanced_inputs_fill_every_class() {
        let m = crate::model::gen_toy_model(crate::model::Arch::PlainCnn, Some(&[4, 4, 4, 4, 8]), 2).unwrap();
        let xs = class_balanced_inputs(&m, 5, 40, &m.input_shape, 4000).unwrap();
        assert_eq!(xs.len(), 40);
        let mut counts = vec![0; m.num_classes()];
        for x in &xs {
            counts[argmax(m.forward(x).unwrap().data())] += 1;
        }
        assert!(counts.iter().all(|&c| c == 40 / m.num_classes()), "{counts:?}");
        // Too few draws: padded from leftovers, still n inputs.
        assert_eq!(class_balanced_inputs(&m, 5, 40, &m.input_shape, 20).unwrap().len(), 20);
    }

    #[test]
    fn inputs_are_deterministic() {
        let a = sample_inputs(4, 3, &[2, 2]);
        let b = sample_inputs(4, 3, &[2, 2]);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }
}

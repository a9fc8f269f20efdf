//! Sign fitting: move a latent vector until a differentiable readout has the
//! requested signs with a margin.

use crate::error::{Error, Result};

use super::codec::SignatureBits;

pub(crate) trait Readout {
    fn value(&self, z: &[f64]) -> Vec<f64>;
    /// Gradient of `<g, value(z)>` with respect to `z`.
    fn vjp(&self, z: &[f64], g: &[f64]) -> Vec<f64>;
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Objective<'a> {
    target: Vec<f64>,
    margin: f64,
    kappa: f64,
    readout: &'a dyn Readout,
}

impl Objective<'_> {
    fn loss(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.target)
            .map(|(v, s)| softplus(self.kappa * (self.margin - s * v)) / self.kappa)
            .sum()
    }

    fn grad(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let gv: Vec<f64> = v
            .iter()
            .zip(&self.target)
            .map(|(v, s)| -s * sigmoid(self.kappa * (self.margin - s * v)))
            .collect();
        self.readout.vjp(z, &gv)
    }

    fn satisfied(&self, v: &[f64]) -> bool {
        v.iter().zip(&self.target).all(|(v, s)| s * v >= self.margin)
    }

    fn ber(&self, v: &[f64]) -> f64 {
        let wrong = v.iter().zip(&self.target).filter(|(v, s)| *s * **v <= 0.0).count();
        wrong as f64 / v.len().max(1) as f64
    }
}

/// Gradient descent with step doubling/halving on a smooth hinge loss.
/// Returns the first iterate whose readout agrees with `target` by at least
/// `margin` on every bit.
pub(crate) fn fit_signs(
    readout: &dyn Readout,
    z0: &[f64],
    target: &SignatureBits,
    margin: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let obj = Objective {
        target: target.0.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect(),
        margin,
        kappa: 4.0 / margin,
        readout,
    };
    let mut z = z0.to_vec();
    let mut v = readout.value(&z);
    let mut loss = obj.loss(&v);
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut g = obj.grad(&z, &v);
    let mut step = 1e-3 * (norm(&z) + margin) / norm(&g).max(1e-300);
    for _ in 0..max_steps {
        if obj.satisfied(&v) {
            return Ok(z);
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let cv = readout.value(&cand);
            let cl = obj.loss(&cv);
            if cl < loss {
                z = cand;
                v = cv;
                loss = cl;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        g = obj.grad(&z, &v);
    }
    if obj.satisfied(&v) {
        Ok(z)
    } else {
        Err(Error::NonConvergent { ber: obj.ber(&v) })
    }
}

pub(crate) struct LinearReadout<'a> {
    /// Row-major `[T, D]`.
    pub matrix: &'a [f64],
    pub cols: usize,
}

impl Readout for LinearReadout<'_> {
    fn value(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn vjp(&self, _z: &[f64], g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, gv) in self.matrix.chunks_exact(self.cols).zip(g) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * gv;
            }
        }
        out
    }
}

//! Two-layer perceptron with a tanh hidden layer, used as a key-side
//! extractor or passport generator.

use serde::{Deserialize, Serialize};

use crate::rng::Prng;
use crate::tensor::{Sum2, Tensor};

use super::key::b64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `[in, hidden]`.
    #[serde(with = "b64")]
    pub w1: Tensor,
    #[serde(with = "b64")]
    pub b1: Tensor,
    /// `[hidden, out]`.
    #[serde(with = "b64")]
    pub w2: Tensor,
    #[serde(with = "b64")]
    pub b2: Tensor,
}

fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let n = m.dim(1);
    let mut acc = vec![Sum2::default(); n];
    for (k, &xv) in x.iter().enumerate() {
        for (a, &mv) in acc.iter_mut().zip(&m.data()[k * n..(k + 1) * n]) {
            a.add(xv * mv);
        }
    }
    acc.into_iter().map(Sum2::value).collect()
}

fn mat_vec(m: &Tensor, g: &[f64]) -> Vec<f64> {
    let n = m.dim(1);
    (0..m.dim(0))
        .map(|k| {
            let mut a = Sum2::default();
            for (&mv, &gv) in m.data()[k * n..(k + 1) * n].iter().zip(g) {
                a.add(mv * gv);
            }
            a.value()
        })
        .collect()
}

impl Mlp {
    /// Gaussian weights with variance `1 / fan_in` (first layer additionally
    /// divided by `input_rms^2` so pre-activations are of unit scale).
    pub fn random(rng: &mut Prng, input: usize, hidden: usize, output: usize, input_rms: f64) -> Self {
        let s1 = 1.0 / ((input as f64).sqrt() * input_rms.max(1e-12));
        let s2 = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: Tensor::from_fn(&[input, hidden], |_| rng.normal() * s1),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::from_fn(&[hidden, output], |_| rng.normal() * s2),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.dim(0)
    }

    pub fn outputs(&self) -> usize {
        self.w2.dim(1)
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        vec_mat(x, &self.w1)
            .into_iter()
            .zip(self.b1.data())
            .map(|(p, b)| (p + b).tanh())
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden(x);
        vec_mat(&h, &self.w2)
            .into_iter()
            .zip(self.b2.data())
            .map(|(p, b)| p + b)
            .collect()
    }

    /// Gradient with respect to the input of `<g, forward(x)>`.
    pub fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let h = self.hidden(x);
        let gh = mat_vec(&self.w2, g);
        let gp: Vec<f64> = gh.iter().zip(&h).map(|(g, h)| g * (1.0 - h * h)).collect();
        mat_vec(&self.w1, &gp)
    }

    /// Rescales the output layer so outputs on `x` have the given RMS.
    pub fn normalize_output(&mut self, x: &[f64], rms: f64) {
        let y = self.forward(x);
        let cur = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
        let k = rms / cur.max(1e-300);
        for v in self.w2.data_mut() {
            *v *= k;
        }
        for v in self.b2.data_mut() {
            *v *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Prng::new(4);
        let m = Mlp::random(&mut rng, 5, 7, 3, 1.0);
        let x: Vec<f64> = rng.normals(5);
        let g: Vec<f64> = rng.normals(3);
        let grad = m.vjp(&x, &g);
        let f = |x: &[f64]| m.forward(x).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6, "{fd} vs {}", grad[i]);
        }
    }
}

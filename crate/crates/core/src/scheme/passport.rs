//! Passport responses and the private inference branch.

use crate::equiv::Classifier;
use crate::error::{Error, Result};
use crate::model::{ConvBlock, ForwardOptions, Model, NormOverrides};
use crate::tensor::{self, Tensor};

use super::key::{Payload, WatermarkKey};

/// Spatial size of a passport for `block`: 1x1 kernels see a single pixel,
/// larger kernels an 8x8 patch.
pub(crate) fn passport_shape(block: &ConvBlock) -> [usize; 3] {
    let (k1, k2) = block.kernel();
    if k1 == 1 && k2 == 1 {
        [block.in_channels(), 1, 1]
    } else {
        [block.in_channels(), 8, 8]
    }
}

/// Per-output-channel spatial mean of `conv(p, W)` without bias.
pub(crate) fn response(block: &ConvBlock, p: &Tensor) -> Result<Vec<f64>> {
    let w = block.effective_weight();
    let y = tensor::conv2d(p, &w, &Tensor::zeros(&[block.out_channels()]), 1, block.padding)?;
    Ok(tensor::global_avg_pool(&y)?.into_data())
}

/// `A[r, u, v]`: mean over output positions of the (zero padded) passport
/// value under kernel tap `(u, v)`. `response_i = sum W[r, i, u, v] A[r, u, v]`.
pub(crate) fn patch_average(block: &ConvBlock, p: &Tensor) -> Result<Tensor> {
    let (cin, k1, k2) = (block.in_channels(), block.kernel().0, block.kernel().1);
    let (h, w) = (p.dim(1), p.dim(2));
    let pad = block.padding;
    if h + 2 * pad < k1 || w + 2 * pad < k2 {
        return Err(Error::InvalidShape {
            op: "passport",
            msg: "passport smaller than kernel".into(),
        });
    }
    let (ho, wo) = (h + 2 * pad - k1 + 1, w + 2 * pad - k2 + 1);
    let mut a = Tensor::zeros(&[cin, k1, k2]);
    for r in 0..cin {
        for u in 0..k1 {
            for v in 0..k2 {
                let mut s = 0.0;
                for oy in 0..ho {
                    let iy = (oy + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        s += p.data()[(r * h + iy as usize) * w + ix as usize];
                    }
                }
                a.data_mut()[(r * k1 + u) * k2 + v] = s / (ho * wo) as f64;
            }
        }
    }
    Ok(a)
}

/// Adds `delta_i * A / |A|^2` to output column `i` of the weight, the
/// smallest change that moves `response_i` by `delta_i`.
pub(crate) fn shift_responses(block: &mut ConvBlock, a: &Tensor, delta: &[f64]) {
    let norm2: f64 = a.data().iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return;
    }
    let cout = block.out_channels();
    let kk = a.dim(1) * a.dim(2);
    let wd = block.weight.data_mut();
    for (i, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for r in 0..a.dim(0) {
            for uv in 0..kk {
                wd[(r * cout + i) * kk + uv] += d * a.data()[r * kk + uv] / norm2;
            }
        }
    }
}

/// Private `(gamma, beta)` for each carrier block of a passport key.
pub fn private_overrides(model: &Model, key: &WatermarkKey) -> Result<NormOverrides> {
    let mut out = NormOverrides::new();
    for (b, &id) in key.carrier.blocks.iter().enumerate() {
        let block = model
            .conv(id)
            .ok_or_else(|| Error::CarrierOutOfRange(format!("block {id} is not a convolution")))?;
        if block.norm.gamma().is_none() {
            return Err(Error::CarrierOutOfRange(format!("block {id} has no normalization")));
        }
        let pair = match &key.payload {
            Payload::Deepipr {
                passports_gamma,
                passports_beta,
            } => (
                response(block, &passports_gamma[b])?,
                response(block, &passports_beta[b])?,
            ),
            Payload::PassportAware {
                passports_gamma,
                passports_beta,
                gen_gamma,
                gen_beta,
                ..
            } => (
                gen_gamma[b].forward(&response(block, &passports_gamma[b])?),
                gen_beta[b].forward(&response(block, &passports_beta[b])?),
            ),
            _ => {
                return Err(Error::Key(format!(
                    "scheme {} has no private branch",
                    key.scheme
                )))
            }
        };
        out.insert(id, pair);
    }
    Ok(out)
}

/// The model evaluated with private passport-derived normalization
/// parameters in place of the public ones.
pub struct PrivateBranch<'a> {
    model: &'a Model,
    overrides: NormOverrides,
}

impl PrivateBranch<'_> {
    pub fn overrides(&self) -> &NormOverrides {
        &self.overrides
    }
}

pub fn private_passport_forward<'a>(model: &'a Model, key: &WatermarkKey) -> Result<PrivateBranch<'a>> {
    Ok(PrivateBranch {
        model,
        overrides: private_overrides(model, key)?,
    })
}

impl Classifier for PrivateBranch<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .model
            .forward_with(
                x,
                &ForwardOptions {
                    capture: &[],
                    norm_overrides: Some(&self.overrides),
                },
            )?
            .logits)
    }
}

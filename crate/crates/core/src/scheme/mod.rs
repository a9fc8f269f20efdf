//! White-box watermark schemes: key generation, extraction and embedding.
//!
//! Every scheme reads a real number per signature bit from the model (its
//! *readout*) and thresholds it at zero. The schemes differ in where the
//! carrier lives and what key-side map turns carrier values into readouts:
//!
//! | scheme | carrier | readout |
//! |---|---|---|
//! | `uchida` | mean over input channels of a conv kernel | Gaussian projection |
//! | `riga` | same | key-side tanh MLP |
//! | `scale_sign` | normalization scales | selected entries |
//! | `greedy_residuals` | per-output weight rows | pooled top-magnitude mean |
//! | `lottery_mask` | binary weight mask | per channel pair density minus 1/2 |
//! | `deepsigns` | trigger-averaged pre-norm responses | Gaussian projection |
//! | `ipr_ic` | final recurrent state on a trigger | selected entries |
//! | `deepipr` | passport-derived scales | selected entries |
//! | `passport_aware` | generator outputs from passports | Gaussian projection |

mod carrier;
mod codec;
mod key;
mod mlp;
mod optim;
mod passport;

use crate::equiv::sample_inputs;
use crate::error::{Error, Result};
use crate::model::toy::standardize_head;
use crate::model::{BlockId, Model};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::transform;

pub use codec::{ber, threshold, SignatureBits};
pub use key::{CarrierSelector, Payload, Scheme, WatermarkKey, KEY_FORMAT, KEY_VERSION};
pub use mlp::Mlp;
pub use passport::{private_overrides, private_passport_forward, PrivateBranch};

use carrier::{conv_carrier, default_carrier, final_hidden, greedy_row, latent, readout, weight_row};
use optim::{fit_signs, LinearReadout, Readout};

/// The demonstration signature, 160 bits.
pub const DEFAULT_SIGNATURE: &str = "this is my signature";

pub const RIGA_HIDDEN: usize = 256;
pub const DEEPSIGNS_TRIGGERS: usize = 16;
pub const GREEDY_ETA: f64 = 0.5;
pub const GREEDY_POOL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedBudget {
    pub max_steps: usize,
}

impl Default for EmbedBudget {
    fn default() -> Self {
        EmbedBudget { max_steps: 5000 }
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Block-local position of a flat carrier index.
fn locate(widths: &[usize], mut i: usize) -> (usize, usize) {
    for (b, &w) in widths.iter().enumerate() {
        if i < w {
            return (b, i);
        }
        i -= w;
    }
    unreachable!("index checked against carrier length")
}

fn out_widths(model: &Model, blocks: &[BlockId]) -> Result<Vec<usize>> {
    blocks
        .iter()
        .map(|&id| conv_carrier(model, id).map(|b| b.out_channels()))
        .collect()
}

fn passport(rng: &mut Prng, model: &Model, id: BlockId, target_rms: f64) -> Result<Tensor> {
    let block = conv_carrier(model, id)?;
    let p = Tensor::from_fn(&passport::passport_shape(block), |_| rng.normal());
    let r = rms(&passport::response(block, &p)?);
    Ok(p.map(|v| v * target_rms / r.max(1e-300)))
}

pub fn keygen(scheme: Scheme, model: &Model, signature: &SignatureBits, seed: u64) -> Result<WatermarkKey> {
    keygen_with(scheme, model, signature, seed, None)
}

/// Draws a key. `carrier` overrides the scheme's default carrier blocks.
pub fn keygen_with(
    scheme: Scheme,
    model: &Model,
    signature: &SignatureBits,
    seed: u64,
    carrier: Option<Vec<BlockId>>,
) -> Result<WatermarkKey> {
    let t = signature.len();
    if t == 0 {
        return Err(Error::Key("empty signature".into()));
    }
    let blocks = match carrier {
        Some(b) => b,
        None => default_carrier(scheme, model, t)?,
    };
    let mut rng = Prng::new(seed);
    let mut indices = Vec::new();
    let choose = |rng: &mut Prng, len: usize| -> Result<Vec<usize>> {
        if len < t {
            return Err(Error::Incompatible {
                scheme: scheme.name(),
                reason: format!("carrier holds {len} values, signature needs {t}"),
            });
        }
        Ok(rng.choose(len, t))
    };
    let payload = match scheme {
        Scheme::Uchida => {
            let d = carrier::mean_kernel(model, &blocks)?.len();
            choose(&mut rng, d)?;
            Payload::Uchida {
                projection: Tensor::from_fn(&[t, d], |_| rng.normal()),
            }
        }
        Scheme::Riga => {
            let z = carrier::mean_kernel(model, &blocks)?;
            choose(&mut rng, z.len())?;
            Payload::Riga {
                extractor: Mlp::random(&mut rng, z.len(), RIGA_HIDDEN, t, rms(&z)),
            }
        }
        Scheme::ScaleSign => {
            indices = choose(&mut rng, carrier::gammas(model, &blocks)?.len())?;
            Payload::ScaleSign
        }
        Scheme::GreedyResiduals => {
            let len = carrier::greedy_values(model, &blocks, GREEDY_ETA, GREEDY_POOL)?.len();
            indices = choose(&mut rng, len)?;
            Payload::GreedyResiduals {
                eta: GREEDY_ETA,
                pool_width: GREEDY_POOL,
            }
        }
        Scheme::LotteryMask => {
            indices = choose(&mut rng, carrier::mask_density(model, &blocks)?.len())?;
            Payload::LotteryMask {
                filler_seed: rng.next_u64(),
            }
        }
        Scheme::Deepsigns => {
            let c: usize = out_widths(model, &blocks)?.iter().sum();
            Payload::Deepsigns {
                projection: Tensor::from_fn(&[t, c], |_| rng.normal()),
                triggers: sample_inputs(rng.next_u64(), DEEPSIGNS_TRIGGERS, &model.input_shape),
            }
        }
        Scheme::IprIc => {
            if blocks.len() != 1 {
                return Err(Error::Key("ipr_ic uses exactly one recurrent carrier".into()));
            }
            let n = model
                .rnn(blocks[0])
                .ok_or_else(|| Error::CarrierOutOfRange(format!("block {} is not a recurrent cell", blocks[0])))?
                .hidden();
            indices = choose(&mut rng, n)?;
            Payload::IprIc {
                trigger: sample_inputs(rng.next_u64(), 1, &model.input_shape).remove(0),
            }
        }
        Scheme::Deepipr => {
            let c: usize = out_widths(model, &blocks)?.iter().sum();
            indices = choose(&mut rng, c)?;
            let mut pg = Vec::new();
            let mut pb = Vec::new();
            for &id in &blocks {
                pg.push(passport(&mut rng, model, id, 1.0)?);
                pb.push(passport(&mut rng, model, id, 0.5)?);
            }
            Payload::Deepipr {
                passports_gamma: pg,
                passports_beta: pb,
            }
        }
        Scheme::PassportAware => {
            let widths = out_widths(model, &blocks)?;
            let total: usize = widths.iter().sum();
            let (mut pg, mut pb, mut gg, mut gb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (&id, &c) in blocks.iter().zip(&widths) {
                let block = conv_carrier(model, id)?;
                let p_g = passport(&mut rng, model, id, 1.0)?;
                let p_b = passport(&mut rng, model, id, 1.0)?;
                let mut f_g = Mlp::random(&mut rng, c, c, c, 1.0);
                let mut f_b = Mlp::random(&mut rng, c, c, c, 1.0);
                f_g.normalize_output(&passport::response(block, &p_g)?, 1.0);
                f_b.normalize_output(&passport::response(block, &p_b)?, 0.5);
                pg.push(p_g);
                pb.push(p_b);
                gg.push(f_g);
                gb.push(f_b);
            }
            Payload::PassportAware {
                passports_gamma: pg,
                passports_beta: pb,
                gen_gamma: gg,
                gen_beta: gb,
                projection: Tensor::from_fn(&[t, total], |_| rng.normal()),
            }
        }
    };
    let key = WatermarkKey {
        format: KEY_FORMAT.into(),
        version: KEY_VERSION,
        scheme,
        signature: signature.clone(),
        carrier: CarrierSelector { blocks, indices },
        payload,
    };
    // Surfaces carrier/key mismatches at generation time.
    readout(model, &key)?;
    Ok(key)
}

pub fn extract(model: &Model, key: &WatermarkKey) -> Result<SignatureBits> {
    Ok(threshold(&readout(model, key)?))
}

/// Real-valued readouts before thresholding (diagnostics).
pub fn extract_scores(model: &Model, key: &WatermarkKey) -> Result<Vec<f64>> {
    readout(model, key)
}

struct MlpReadout<'a>(&'a Mlp);

impl Readout for MlpReadout<'_> {
    fn value(&self, z: &[f64]) -> Vec<f64> {
        self.0.forward(z)
    }

    fn vjp(&self, z: &[f64], g: &[f64]) -> Vec<f64> {
        self.0.vjp(z, g)
    }
}

struct GeneratorReadout<'a> {
    gens: &'a [Mlp],
    projection: LinearReadout<'a>,
}

impl Readout for GeneratorReadout<'_> {
    fn value(&self, z: &[f64]) -> Vec<f64> {
        let g = carrier::generate(self.gens, z).expect("widths validated before fitting");
        self.projection.value(&g)
    }

    fn vjp(&self, z: &[f64], g: &[f64]) -> Vec<f64> {
        let gg = self.projection.vjp(&[], g);
        let mut out = Vec::with_capacity(z.len());
        let mut off = 0;
        for m in self.gens {
            let n = m.inputs();
            out.extend(m.vjp(&z[off..off + n], &gg[off..off + n]));
            off += n;
        }
        out
    }
}

fn projection_margin(v0: &[f64]) -> f64 {
    (0.1 * rms(v0)).max(1e-9)
}

/// Writes the signature into `model`. Returns the model unchanged if the
/// signature already reads back exactly.
pub fn embed(model: &Model, key: &WatermarkKey, budget: EmbedBudget) -> Result<Model> {
    let sig = &key.signature;
    if &extract(model, key)? == sig {
        return Ok(model.clone());
    }
    let blocks = key.carrier.blocks.clone();
    let idx = &key.carrier.indices;
    let mut out = model.clone();
    match &key.payload {
        Payload::Uchida { .. } | Payload::Riga { .. } => {
            let z0 = latent(model, key)?;
            let m = projection_margin(&readout(model, key)?);
            let z = match &key.payload {
                Payload::Uchida { projection } => fit_signs(
                    &LinearReadout {
                        matrix: projection.data(),
                        cols: z0.len(),
                    },
                    &z0,
                    sig,
                    m,
                    budget.max_steps,
                )?,
                Payload::Riga { extractor } => fit_signs(&MlpReadout(extractor), &z0, sig, m, budget.max_steps)?,
                _ => unreachable!(),
            };
            // Spread the change of the channel mean equally over input slices.
            let mut off = 0;
            for &id in &blocks {
                let b = out.conv_mut(id).unwrap();
                let row = b.weight.inner_len();
                let cin = b.in_channels();
                for r in 0..cin {
                    for j in 0..row {
                        b.weight.data_mut()[r * row + j] += z[off + j] - z0[off + j];
                    }
                }
                off += row;
            }
        }
        Payload::ScaleSign => {
            let widths = out_widths(model, &blocks)?;
            for (t, &i) in idx.iter().enumerate() {
                let (b, local) = locate(&widths, i);
                let block = out.conv_mut(blocks[b]).unwrap();
                let (gamma, _) = block.norm.gamma_beta_mut().unwrap();
                let mag = gamma[local].abs().max(1e-3);
                gamma[local] = if sig.0[t] { mag } else { -mag };
            }
        }
        Payload::GreedyResiduals { eta, pool_width } => {
            let widths = out_widths(model, &blocks)?;
            let m = projection_margin(&carrier::greedy_values(model, &blocks, *eta, *pool_width)?);
            for (t, &i) in idx.iter().enumerate() {
                let (b, o) = locate(&widths, i);
                let s = if sig.0[t] { 1.0 } else { -1.0 };
                let block = out.conv_mut(blocks[b]).unwrap();
                let mut row = weight_row(block, o);
                let mut ok = false;
                for _ in 0..100 {
                    let (v, kept) = greedy_row(&row, *eta, *pool_width);
                    if s * v >= m {
                        ok = true;
                        break;
                    }
                    let d = 1.5 * m - s * v;
                    for &w in &kept {
                        for x in &mut row[w * pool_width..(w + 1) * pool_width] {
                            *x += s * d;
                        }
                    }
                }
                if !ok {
                    return Err(Error::NonConvergent {
                        ber: ber(&extract(&out, key)?, sig)?,
                    });
                }
                let (cout, kk) = (block.out_channels(), block.kernel().0 * block.kernel().1);
                for (r, chunk) in row.chunks_exact(kk).enumerate() {
                    block.weight.data_mut()[(r * cout + o) * kk..(r * cout + o + 1) * kk].copy_from_slice(chunk);
                }
            }
        }
        Payload::LotteryMask { filler_seed } => {
            let mut filler = Prng::new(*filler_seed);
            let total = carrier::mask_density(model, &blocks)?.len();
            let mut bits: Vec<bool> = (0..total).map(|_| filler.bit()).collect();
            for (t, &i) in idx.iter().enumerate() {
                bits[i] = sig.0[t];
            }
            let mut off = 0;
            for &id in &blocks {
                let b = out.conv_mut(id).unwrap();
                let kk = b.kernel().0 * b.kernel().1;
                let pairs = b.in_channels() * b.out_channels();
                let mut mask = Tensor::zeros(b.weight.shape());
                for p in 0..pairs {
                    let w = &b.weight.data()[p * kk..(p + 1) * kk];
                    let mut order: Vec<usize> = (0..kk).collect();
                    order.sort_by(|&x, &y| w[y].abs().total_cmp(&w[x].abs()).then(x.cmp(&y)));
                    let keep = if bits[off + p] { kk - kk / 3 } else { kk / 3 };
                    for &k in &order[..keep] {
                        mask.data_mut()[p * kk + k] = 1.0;
                    }
                }
                b.mask = Some(mask);
                off += pairs;
            }
        }
        Payload::Deepsigns { projection, .. } => {
            // The readout is linear in the bias, one to one per channel.
            let z0 = latent(model, key)?;
            let m = projection_margin(&readout(model, key)?);
            let r = LinearReadout {
                matrix: projection.data(),
                cols: z0.len(),
            };
            let z = fit_signs(&r, &z0, sig, m, budget.max_steps)?;
            let mut off = 0;
            for &id in &blocks {
                let b = out.conv_mut(id).unwrap();
                for (o, v) in b.bias.data_mut().iter_mut().enumerate() {
                    *v += z[off + o] - z0[off + o];
                }
                off += b.out_channels();
            }
        }
        Payload::IprIc { trigger } => {
            let id = blocks[0];
            let n = out.rnn(id).unwrap().hidden();
            let margin = 0.01;
            let mut done = false;
            for _ in 0..64 {
                let h = final_hidden(&out, id, trigger)?;
                let mut s = vec![1i8; n];
                let mut weak = Vec::new();
                for (t, &i) in idx.iter().enumerate() {
                    let want = if sig.0[t] { 1.0 } else { -1.0 };
                    if h[i] * want < 0.0 {
                        s[i] = -1;
                    }
                    if h[i].abs() < margin {
                        weak.push((i, want));
                    }
                }
                if s.contains(&-1) {
                    out = transform::sign_flip(&out, id, &s)?;
                }
                if weak.is_empty() {
                    done = true;
                    break;
                }
                let cell = out.rnn_mut(id).unwrap();
                for (i, want) in weak {
                    cell.bias.data_mut()[i] += want * 0.1;
                }
            }
            if !done {
                return Err(Error::NonConvergent {
                    ber: ber(&extract(&out, key)?, sig)?,
                });
            }
        }
        Payload::Deepipr { passports_gamma, .. } => {
            let widths = out_widths(model, &blocks)?;
            let z = latent(model, key)?;
            let m = projection_margin(&z);
            let mut deltas: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
            for (t, &i) in idx.iter().enumerate() {
                let s = if sig.0[t] { 1.0 } else { -1.0 };
                let v = z[i];
                if s * v < m {
                    let (b, local) = locate(&widths, i);
                    deltas[b][local] = s * v.abs().max(m) - v;
                }
            }
            for (b, &id) in blocks.iter().enumerate() {
                let a = passport::patch_average(conv_carrier(&out, id)?, &passports_gamma[b])?;
                passport::shift_responses(out.conv_mut(id).unwrap(), &a, &deltas[b]);
            }
            publish_private(&mut out, key)?;
        }
        Payload::PassportAware {
            passports_gamma,
            gen_gamma,
            projection,
            ..
        } => {
            let z0 = latent(model, key)?;
            let m = projection_margin(&readout(model, key)?);
            carrier::generate(gen_gamma, &z0)?;
            let r = GeneratorReadout {
                gens: gen_gamma,
                projection: LinearReadout {
                    matrix: projection.data(),
                    cols: z0.len(),
                },
            };
            let z = fit_signs(&r, &z0, sig, m, budget.max_steps)?;
            let mut off = 0;
            for (b, &id) in blocks.iter().enumerate() {
                let c = conv_carrier(&out, id)?.out_channels();
                let delta: Vec<f64> = (0..c).map(|o| z[off + o] - z0[off + o]).collect();
                let a = passport::patch_average(conv_carrier(&out, id)?, &passports_gamma[b])?;
                passport::shift_responses(out.conv_mut(id).unwrap(), &a, &delta);
                off += c;
            }
            publish_private(&mut out, key)?;
        }
    }
    let got = extract(&out, key)?;
    let e = ber(&got, sig)?;
    if e > 0.0 {
        return Err(Error::NonConvergent { ber: e });
    }
    Ok(out)
}

/// Copies the private normalization parameters into the public ones so
/// both branches compute the same function, then refits the head scale to
/// the new features (training would adapt it alongside the passports).
fn publish_private(model: &mut Model, key: &WatermarkKey) -> Result<()> {
    for (id, (g, b)) in private_overrides(model, key)? {
        let block = model.conv_mut(id).unwrap();
        let (gamma, beta) = block.norm.gamma_beta_mut().unwrap();
        *gamma = g;
        *beta = b;
    }
    standardize_head(model)
}

/// Rewrites a sign-carried signature with `attacker` bits using only sign
/// flips, so the model computes exactly the same function. Returns the
/// modified model and the attacker's key.
pub fn overwrite_signature(
    model: &Model,
    key: &WatermarkKey,
    attacker: &SignatureBits,
) -> Result<(Model, WatermarkKey)> {
    if key.scheme != Scheme::ScaleSign {
        return Err(Error::Incompatible {
            scheme: key.scheme.name(),
            reason: "overwrite needs a sign-carried signature".into(),
        });
    }
    let blocks = &key.carrier.blocks;
    let carrier_len = carrier::gammas(model, blocks)?.len();
    if attacker.is_empty() || attacker.len() > carrier_len {
        return Err(Error::CarrierOutOfRange(format!(
            "{} attacker bits for a carrier of {carrier_len} scales",
            attacker.len()
        )));
    }
    // Reuse the owner's positions so the owner's readout is overwritten, then
    // top up with unused positions if the attacker's signature is longer.
    let mut indices: Vec<usize> = key.carrier.indices.iter().copied().take(attacker.len()).collect();
    let mut free = (0..carrier_len).filter(|i| !key.carrier.indices.contains(i));
    while indices.len() < attacker.len() {
        indices.push(free.next().unwrap());
    }
    let widths = out_widths(model, blocks)?;
    let gammas = carrier::gammas(model, blocks)?;
    let mut signs: Vec<Vec<i8>> = widths.iter().map(|&w| vec![1; w]).collect();
    for (t, &i) in indices.iter().enumerate() {
        if (gammas[i] > 0.0) != attacker.0[t] && gammas[i] != 0.0 {
            let (b, local) = locate(&widths, i);
            signs[b][local] = -1;
        }
    }
    let mut out = model.clone();
    for (b, s) in signs.iter().enumerate() {
        if s.contains(&-1) {
            out = transform::sign_flip(&out, blocks[b], s)?;
        }
    }
    let mut forged = key.clone();
    forged.signature = attacker.clone();
    forged.carrier.indices = indices;
    Ok((out, forged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_signature_has_160_bits() {
        let s = SignatureBits::from_text(DEFAULT_SIGNATURE);
        assert_eq!(s.len(), 160);
        assert_eq!(s.ones(), 77);
    }

    #[test]
    fn locate_walks_blocks() {
        assert_eq!(locate(&[3, 4], 0), (0, 0));
        assert_eq!(locate(&[3, 4], 3), (1, 0));
        assert_eq!(locate(&[3, 4], 6), (1, 3));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("nope".parse::<Scheme>().is_err());
    }
}

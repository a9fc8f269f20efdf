//! Kernels against naive-loop oracles and the algebraic identities the
//! transforms rely on.

mod common;

use common::*;
use neuroscrub::rng::Prng;
use neuroscrub::tensor::{self, conv2d, global_avg_pool, group_norm, matmul, pool, PoolKind, PoolSpec, Tensor};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct ConvCase {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    stride: usize,
    pad: usize,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..5, 1usize..5, 1usize..4, 1usize..4, 1usize..4, 0usize..3, any::<u64>())
        .prop_flat_map(|(cin, cout, k1, k2, stride, pad, seed)| {
            (Just((cin, cout, k1, k2, stride, pad.min(k1.min(k2) - 1), seed)), k1..10, k2..10)
        })
        .prop_map(|((cin, cout, k1, k2, stride, pad, seed), h, w)| ConvCase {
            cin,
            cout,
            h,
            w,
            k1,
            k2,
            stride,
            pad,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conv2d_matches_oracle(c in conv_case()) {
        let mut rng = Prng::new(c.seed);
        let x = gaussian(&mut rng, &[c.cin, c.h, c.w]);
        let w = gaussian(&mut rng, &[c.cin, c.cout, c.k1, c.k2]);
        let b = gaussian(&mut rng, &[c.cout]);
        let got = conv2d(&x, &w, &b, c.stride, c.pad).unwrap();
        prop_assert!(same_bits(&got, &naive_conv(&x, &w, &b, c.stride, c.pad)));
        // Determinism.
        prop_assert!(same_bits(&got, &conv2d(&x, &w, &b, c.stride, c.pad).unwrap()));
    }

    #[test]
    fn conv2d_negation_and_power_of_two(c in conv_case(), k in -20i32..20) {
        let mut rng = Prng::new(c.seed ^ 1);
        let x = gaussian(&mut rng, &[c.cin, c.h, c.w]);
        let w = gaussian(&mut rng, &[c.cin, c.cout, c.k1, c.k2]);
        let b = gaussian(&mut rng, &[c.cout]);
        let y = conv2d(&x, &w, &b, c.stride, c.pad).unwrap();
        let neg = conv2d(&x.map(|v| -v), &w, &b.map(|v| -v), c.stride, c.pad).unwrap();
        prop_assert!(same_bits(&neg, &y.map(|v| -v)));
        let lam = 2f64.powi(k);
        let scaled = conv2d(&x, &w.map(|v| v * lam), &b.map(|v| v * lam), c.stride, c.pad).unwrap();
        prop_assert!(same_bits(&scaled, &y.map(|v| v * lam)));
    }

    #[test]
    fn matmul_matches_oracle(m in 1usize..8, k in 1usize..12, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let a = gaussian(&mut rng, &[m, k]);
        let b = gaussian(&mut rng, &[k, n]);
        let y = matmul(&a, &b).unwrap();
        prop_assert!(same_bits(&y, &naive_matmul(&a, &b)));
        prop_assert!(same_bits(&matmul(&a.map(|v| -v), &b).unwrap(), &y.map(|v| -v)));
    }

    #[test]
    fn pool_matches_oracle(c in 1usize..4, k in 1usize..4, stride in 1usize..4, extra in 0usize..6, max in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let x = gaussian(&mut rng, &[c, k + extra, k + extra + 1]);
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let y = pool(&x, PoolSpec { kind, window: k, stride }).unwrap();
        prop_assert!(same_bits(&y, &naive_pool(&x, kind, k, stride)));
    }

    #[test]
    fn norms_match_oracle(groups in 1usize..4, per in 1usize..4, hw in 1usize..6, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let c = groups * per;
        let x = gaussian(&mut rng, &[c, hw, hw]);
        let gamma = rng.normals(c);
        let beta = rng.normals(c);
        let y = group_norm(&x, groups, &gamma, &beta).unwrap();
        prop_assert!(same_bits(&y, &naive_group_norm(&x, groups, &gamma, &beta)));

        let mean = rng.normals(c);
        let std: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
        let y = tensor::affine_norm(&x, &gamma, &beta, &mean, &std).unwrap();
        let inner = hw * hw;
        for (i, v) in y.data().iter().enumerate() {
            let ch = i / inner;
            let want = gamma[ch] * (x.data()[i] - mean[ch]) / std[ch] + beta[ch];
            prop_assert_eq!(v.to_bits(), want.to_bits());
        }
    }
}

#[test]
fn global_average_pool_is_plain_mean() {
    let mut rng = Prng::new(4);
    let x = gaussian(&mut rng, &[3, 4, 5]);
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.shape(), &[3, 1, 1]);
    for ch in 0..3 {
        let mut s = 0.0;
        for v in &x.data()[ch * 20..(ch + 1) * 20] {
            s += v;
        }
        assert_eq!(y.data()[ch].to_bits(), (s / 20.0).to_bits());
    }
}

#[test]
fn group_stats_on_constant_input_stay_finite() {
    let x = Tensor::full(&[4, 3, 3], 2.5);
    let y = group_norm(&x, 2, &[1.0; 4], &[0.0; 4]).unwrap();
    assert!(y.all_finite());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

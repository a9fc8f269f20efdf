use std::collections::BTreeMap;

use neuroscrub::equiv::{compare, sample_inputs, Tolerance};
use neuroscrub::model::topology::Topology;
use neuroscrub::model::{
    gen_toy_model, incoming_weights, outgoing_weights, Arch, BlockId, BlockRef, ConvBlock, Model, NeuronAddr, Node,
    Norm, ParamKind, ParamRef, Residual,
};
use neuroscrub::rng::Prng;
use neuroscrub::tensor::{self, Activation, Tensor};
use neuroscrub::transform::{
    apply_plan, attack, grouped_perm, invert_plan, layer_shuffle, layer_shuffle_single, neuron_scale, sign_flip,
    AttackConfig, ScaleMode, TransformPlan, TransformSet,
};
use neuroscrub::Error;

const SMALL: [(Arch, &[usize]); 5] = [
    (Arch::PlainCnn, &[4, 4, 8, 4, 6]),
    (Arch::ResnetMini, &[4, 8, 8, 6]),
    (Arch::InceptionMini, &[4, 2, 2, 3, 2, 3, 4, 6]),
    (Arch::GroupnormCnn, &[4, 8, 4, 8, 4]),
    (Arch::TanhRnn, &[3, 5]),
];

fn small(arch: Arch, seed: u64) -> Model {
    let widths = SMALL.iter().find(|(a, _)| *a == arch).unwrap().1;
    gen_toy_model(arch, Some(widths), seed).unwrap()
}

/// Every scalar parameter of the model.
fn universe(model: &Model) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for id in 0..model.num_blocks() {
        let block = BlockId(id);
        let mut push = |kind, n: usize| out.extend((0..n).map(|index| ParamRef { block, kind, index }));
        match model.block(block).unwrap() {
            BlockRef::Conv(b) => {
                push(ParamKind::Weight, b.weight.len());
                if let Some(m) = &b.mask {
                    push(ParamKind::Mask, m.len());
                }
                push(ParamKind::Bias, b.bias.len());
                match &b.norm {
                    Norm::None => {}
                    Norm::Batch { gamma, .. } => {
                        for kind in [ParamKind::Gamma, ParamKind::Beta, ParamKind::Mean, ParamKind::Std] {
                            push(kind, gamma.len());
                        }
                    }
                    Norm::Group { gamma, .. } => {
                        push(ParamKind::Gamma, gamma.len());
                        push(ParamKind::Beta, gamma.len());
                    }
                }
            }
            BlockRef::Rnn(c) => {
                push(ParamKind::InputWeight, c.w_ih.len());
                push(ParamKind::RecurrentWeight, c.w_hh.len());
                push(ParamKind::Bias, c.bias.len());
            }
        }
    }
    out
}

#[test]
fn incoming_views_partition_parameters() {
    for (arch, _) in SMALL {
        let mut m = small(arch, 1);
        if let Some(b) = m.conv_mut(BlockId(1)) {
            b.mask = Some(Tensor::full(b.weight.shape(), 1.0));
        }
        let mut seen: BTreeMap<ParamRef, usize> = BTreeMap::new();
        for id in 0..m.num_blocks() {
            for n in 0..m.block_width(BlockId(id)).unwrap() {
                for p in incoming_weights(&m, NeuronAddr { block: BlockId(id), neuron: n }).unwrap() {
                    *seen.entry(p).or_default() += 1;
                }
            }
        }
        let all = universe(&m);
        assert_eq!(seen.len(), all.len(), "{arch}");
        for p in all {
            assert_eq!(seen.get(&p), Some(&1), "{arch} {p:?}");
        }
    }
}

#[test]
fn outgoing_views_are_disjoint_for_untied_units() {
    for (arch, _) in SMALL {
        let m = small(arch, 2);
        let topo = Topology::of(&m).unwrap();
        let mut seen: BTreeMap<ParamRef, usize> = BTreeMap::new();
        for unit in topo.units().into_iter().filter(|u| !u.is_tied()) {
            let block = unit.members[0];
            for n in 0..unit.width {
                for p in outgoing_weights(&m, NeuronAddr { block, neuron: n }).unwrap() {
                    *seen.entry(p).or_default() += 1;
                }
            }
        }
        assert!(seen.values().all(|&c| c == 1), "{arch}");
        assert!(matches!(
            outgoing_weights(&m, NeuronAddr { block: m.head_id(), neuron: 0 }),
            Err(Error::NoOutgoing(_))
        ));
    }
}

#[test]
fn neuron_out_of_range_is_rejected() {
    let m = small(Arch::PlainCnn, 1);
    let err = incoming_weights(&m, NeuronAddr { block: BlockId(0), neuron: 4 }).unwrap_err();
    assert!(matches!(err, Error::AddressOutOfRange { .. }));
}

fn check(a: &Model, b: &Model, inputs: &[Tensor], tol: Tolerance, what: &str) {
    let r = compare(a, b, inputs, tol).unwrap();
    assert!(r.passed, "{what}: {r:?}");
    assert_eq!(r.top1_agreement, 1.0, "{what}");
}

#[test]
fn every_unit_transform_preserves_function() {
    for (arch, _) in SMALL {
        let m = small(arch, 3);
        let xs = sample_inputs(9, 24, &m.input_shape);
        let topo = Topology::of(&m).unwrap();
        let mut rng = Prng::new(5);
        for unit in topo.units().into_iter().filter(|u| !u.fixed) {
            let block = unit.members[0];
            let w = unit.width;
            let groups = match &m.conv(block).map(|b| &b.norm) {
                Some(Norm::Group { groups, .. }) => *groups,
                _ => w,
            };
            let per = w / groups;
            let p = grouped_perm(w, groups, &mut rng).unwrap();
            let what = format!("{arch} {block} shuffle");
            check(&m, &layer_shuffle(&m, block, &p).unwrap(), &xs, Tolerance::rel(1e-12), &what);

            let s: Vec<i8> = (0..w).map(|i| if (i / per) % 2 == 0 { -1 } else { 1 }).collect();
            match sign_flip(&m, block, &s) {
                Ok(f) => check(&m, &f, &xs, Tolerance::Bitwise, &format!("{arch} {block} flip")),
                Err(e) => assert!(matches!(e, Error::IllegalTransform { .. }), "{arch} {block}: {e}"),
            }

            let pow2: Vec<f64> = (0..w).map(|i| 2f64.powi((i / per) as i32 % 7 - 3)).collect();
            let cont: Vec<f64> = (0..w).map(|i| 0.3 + 1.7 * (i / per) as f64 / groups as f64).collect();
            match neuron_scale(&m, block, &pow2) {
                Ok(scaled) => {
                    check(&m, &scaled, &xs, Tolerance::Bitwise, &format!("{arch} {block} pow2"));
                    let scaled = neuron_scale(&m, block, &cont).unwrap();
                    check(&m, &scaled, &xs, Tolerance::rel(1e-9), &format!("{arch} {block} scale"));
                }
                Err(e) => {
                    assert_eq!(arch, Arch::TanhRnn);
                    assert!(matches!(e, Error::IllegalTransform { .. }));
                }
            }
        }
    }
}

#[test]
fn tied_shuffle_is_necessary() {
    let m = small(Arch::ResnetMini, 4);
    let xs = sample_inputs(2, 16, &m.input_shape);
    let topo = Topology::of(&m).unwrap();
    let unit = topo.units().into_iter().find(|u| u.is_tied()).expect("resnet has tied units");
    let block = unit.members[0];
    let p: Vec<usize> = (0..unit.width).rev().collect();
    check(&m, &layer_shuffle(&m, block, &p).unwrap(), &xs, Tolerance::rel(1e-12), "tied");
    let broken = layer_shuffle_single(&m, block, &p).unwrap();
    assert!(!compare(&m, &broken, &xs, Tolerance::rel(1e-6)).unwrap().passed);
}

#[test]
fn invalid_transform_arguments() {
    let m = small(Arch::GroupnormCnn, 1);
    assert!(matches!(
        layer_shuffle(&m, BlockId(0), &[0, 0, 1, 2]),
        Err(Error::InvalidPermutation(_))
    ));
    // Crossing a normalization group boundary.
    assert!(matches!(
        layer_shuffle(&m, BlockId(1), &[4, 1, 2, 3, 0, 5, 6, 7]),
        Err(Error::GroupStructure { .. })
    ));
    let plain = small(Arch::PlainCnn, 1);
    assert!(matches!(
        neuron_scale(&plain, BlockId(0), &[1.0, 1.0, 1.0, -1.0]),
        Err(Error::NonPositiveScale { .. })
    ));
    assert!(matches!(
        neuron_scale(&m, m.head_id(), &[1.0; 10]),
        Err(Error::NoOutgoing(_))
    ));
}

#[test]
fn plans_replay_and_invert_exactly() {
    for (arch, _) in SMALL {
        let m = small(arch, 6);
        for (mode, transforms) in [
            (ScaleMode::PowerOfTwo, TransformSet::ALL),
            (ScaleMode::Continuous, TransformSet::ALL),
            (ScaleMode::PowerOfTwo, "ls,sf".parse().unwrap()),
        ] {
            let cfg = AttackConfig {
                seed: 17,
                alpha: 0.75,
                transforms,
                scale_mode: mode,
            };
            let (attacked, plan) = attack(&m, &cfg).unwrap();
            let plan = TransformPlan::from_json(&plan.to_json().unwrap()).unwrap();
            assert!(apply_plan(&m, &plan).unwrap().params_bit_eq(&attacked), "{arch} replay");
            let back = invert_plan(&attacked, &plan).unwrap();
            if mode == ScaleMode::PowerOfTwo {
                assert!(back.params_bit_eq(&m), "{arch} inverse");
            }
            let xs = sample_inputs(1, 8, &m.input_shape);
            check(&m, &back, &xs, Tolerance::rel(1e-9), &format!("{arch} inverse forward"));
        }
    }
}

#[test]
fn zero_alpha_attack_is_identity() {
    let m = small(Arch::ResnetMini, 8);
    let (a, _) = attack(&m, &AttackConfig::unified(3, 0.0)).unwrap();
    assert!(a.params_bit_eq(&m));
    assert!(attack(&m, &AttackConfig::unified(3, 1.5)).is_err());
}

#[test]
fn plan_rejects_other_topology() {
    let m = small(Arch::PlainCnn, 1);
    let other = small(Arch::ResnetMini, 1);
    let (_, plan) = attack(&m, &AttackConfig::unified(1, 1.0)).unwrap();
    assert!(matches!(apply_plan(&other, &plan), Err(Error::TopologyMismatch(_))));
}

fn conv(rng: &mut Prng, cin: usize, cout: usize, k: usize, stride: usize, act: Activation) -> ConvBlock {
    ConvBlock {
        weight: Tensor::from_fn(&[cin, cout, k, k], |_| rng.normal() * 0.3),
        bias: Tensor::from_fn(&[cout], |_| rng.normal() * 0.1),
        norm: Norm::Batch {
            gamma: rng.normals(cout),
            beta: rng.normals(cout),
            mean: rng.normals(cout),
            std: (0..cout).map(|_| 0.5 + rng.uniform()).collect(),
        },
        act,
        pool: None,
        stride,
        padding: k / 2,
        mask: None,
    }
}

fn run_block(b: &ConvBlock, x: &Tensor) -> Tensor {
    let lin = tensor::conv2d(x, &b.weight, &b.bias, b.stride, b.padding).unwrap();
    let Norm::Batch { gamma, beta, mean, std } = &b.norm else { unreachable!() };
    tensor::activate(&tensor::affine_norm(&lin, gamma, beta, mean, std).unwrap(), b.act)
}

#[test]
fn residual_forward_is_body_plus_shortcut() {
    let mut rng = Prng::new(12);
    let b1 = conv(&mut rng, 3, 6, 3, 2, Activation::Relu);
    let b2 = conv(&mut rng, 6, 6, 3, 1, Activation::Identity);
    let sc = conv(&mut rng, 3, 6, 1, 2, Activation::Identity);
    let head = ConvBlock {
        weight: Tensor::from_fn(&[6, 4, 1, 1], |_| rng.normal()),
        bias: Tensor::zeros(&[4]),
        norm: Norm::None,
        act: Activation::Identity,
        pool: None,
        stride: 1,
        padding: 0,
        mask: None,
    };
    let model = Model {
        arch: "custom".into(),
        input_shape: vec![3, 8, 8],
        nodes: vec![
            Node::Residual(Residual {
                body: vec![b1.clone(), b2.clone()],
                shortcut: Some(sc.clone()),
                post_act: Activation::Relu,
            }),
            Node::GlobalPool,
        ],
        head: head.clone(),
    };
    let x = Tensor::from_fn(&[3, 8, 8], |_| rng.normal());
    let h = run_block(&b2, &run_block(&b1, &x));
    let s = run_block(&sc, &x);
    let sum = Tensor::new(h.shape().to_vec(), h.data().iter().zip(s.data()).map(|(a, b)| a + b).collect()).unwrap();
    let y = tensor::global_avg_pool(&tensor::activate(&sum, Activation::Relu)).unwrap();
    let logits = tensor::conv2d(&y, &head.weight, &head.bias, 1, 0).unwrap();
    assert!(model.forward(&x).unwrap().data() == logits.data());
}

mod common;

use common::{central_difference, codec, detector, oracle, rel_err, schedule};
use patchsmith::autograd::Graph;
use patchsmith::detector::{Detection, Detector, PERSON};
use patchsmith::diffusion::{LatentState, SamplerConfig};
use patchsmith::error::Error;
use patchsmith::generator::{ConditionRef, GenerationCodec};
use patchsmith::objective::*;
use patchsmith::render::{render_scene, BoundingBox, SceneSample};
use patchsmith::{rng, synth, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn person_scenes(n: usize, seed: u64) -> Vec<SceneSample> {
    let spec = synth::SceneSpec {
        empty_prob: 0.0,
        ..Default::default()
    };
    synth::scenes(&spec, n, seed)
}

fn target_patch() -> Tensor {
    synth::texture(1, common::PATCH, 4)
}

fn latent() -> LatentState {
    let z = codec().encode(&synth::texture(0, common::PATCH, 5)).unwrap();
    LatentState::clean(z, ConditionRef::unconditional())
}

/// A direct implementation of the TV sum over pixels with both neighbors.
fn tv_reference(p: &Tensor) -> f64 {
    let (c, h, w) = p.chw().unwrap();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let v = p.at3(ch, y, x);
                let dx = p.at3(ch, y, x + 1) - v;
                let dy = p.at3(ch, y + 1, x) - v;
                s += (dx * dx + dy * dy + TV_EPS).sqrt();
            }
        }
    }
    s
}

#[test]
fn total_is_affine_in_lambda() {
    let o = oracle(codec().encode(&target_patch()).unwrap());
    let c = codec();
    let sched = schedule();
    let stack = AttackStack::new(&o, &c, &sched, vec![detector() as &dyn Detector]);
    let scenes = person_scenes(3, 1);
    let sampler = SamplerConfig::default();
    let at = |lambda| batch_objective(&scenes, &latent(), &sampler, &stack, lambda).unwrap();
    let (b0, b1, b2) = (at(0.0), at(0.1), at(1.0));
    assert_eq!(b0.total, b0.det_term);
    for b in [b0, b1, b2] {
        assert_eq!(b.det_term, b0.det_term);
        assert_eq!(b.tv_term, b0.tv_term);
        assert!((b.total - (b.det_term + b.lambda * b.tv_term)).abs() < 1e-12);
    }
    assert!((b2.total - b0.total - b0.tv_term).abs() < 1e-12);
    assert!((b1.total - b0.total - 0.1 * b0.tv_term).abs() < 1e-12);
}

#[test]
fn detector_term_is_the_batch_mean_of_detector_losses() {
    let o = oracle(codec().encode(&target_patch()).unwrap());
    let c = codec();
    let sched = schedule();
    let stack = AttackStack::new(&o, &c, &sched, vec![detector() as &dyn Detector]);
    let scenes = person_scenes(4, 2);
    let sampler = SamplerConfig {
        seed: 11,
        ..Default::default()
    };
    let got = batch_objective(&scenes, &latent(), &sampler, &stack, 0.0).unwrap();
    let patch = stack.resample(&latent(), &sampler).unwrap();
    assert!(patch.max_abs_diff(&c.decode(o.target()).unwrap()) < 1e-9);
    let mut want = 0.0;
    for (i, s) in scenes.iter().enumerate() {
        let img = render_scene(s, &patch, &stack.ranges, render_seed(sampler.seed, i), &stack.placement)
            .unwrap()
            .image;
        want += detector_loss(&detector().detect(&img, 0.0).unwrap(), PERSON).unwrap();
    }
    want /= scenes.len() as f64;
    assert!((got.total - want).abs() < 1e-12, "{} vs {want}", got.total);
}

#[test]
fn scene_without_people_costs_only_the_tv_term() {
    let o = oracle(codec().encode(&target_patch()).unwrap());
    let c = codec();
    let sched = schedule();
    let stack = AttackStack::new(&o, &c, &sched, vec![detector() as &dyn Detector]);
    let empty = SceneSample::new(rng::uniform(&[3, 64, 64], 0.2, 0.8, 3), &[], "empty").unwrap();
    let sampler = SamplerConfig::default();
    let b = batch_objective(&[empty], &latent(), &sampler, &stack, 0.1).unwrap();
    let tv = tv_loss(&stack.resample(&latent(), &sampler).unwrap()).unwrap();
    assert_eq!(b.det_term, 0.0);
    assert!((b.total - 0.1 * tv).abs() < 1e-12);
}

#[test]
fn failures_carry_their_stage() {
    let o = oracle(codec().encode(&target_patch()).unwrap());
    let c = codec();
    let sched = schedule();
    let mut stack = AttackStack::new(&o, &c, &sched, vec![detector() as &dyn Detector]);
    stack.person_class = 7;
    let err = batch_objective(&person_scenes(1, 3), &latent(), &SamplerConfig::default(), &stack, 0.1).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "detect", .. }), "{err}");
    stack.person_class = PERSON;
    let bad = SamplerConfig {
        step: 0,
        ..Default::default()
    };
    let err = batch_objective(&person_scenes(1, 3), &latent(), &bad, &stack, 0.1).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "sample", .. }), "{err}");
    assert!(batch_objective(&[], &latent(), &SamplerConfig::default(), &stack, 0.1).is_err());
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let p = rng::uniform(&[3, 6, 5], 0.0, 1.0, 8);
    let mut g = Graph::new();
    let v = g.param(p.clone());
    let t = tv_loss_graph(&mut g, v).unwrap();
    let grad = g.backward(t).get_or_zeros(v);
    for i in 0..p.len() {
        let fd = central_difference(|x| tv_reference(x), &p, i, 1e-6);
        assert!(rel_err(grad.data()[i], fd, 1e-6) < 1e-4, "{i}: {} vs {fd}", grad.data()[i]);
    }
}

#[test]
fn tv_boundary_examples() {
    let two = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
    assert!((tv_loss(&two).unwrap() - 1.0).abs() < 1e-8);
    let row = Tensor::new(&[1, 1, 4], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert_eq!(tv_loss(&row).unwrap(), 0.0);
    assert!(tv_loss(&Tensor::zeros(&[3, 1, 1])).is_err());
}

fn det(obj: f64, person: f64) -> Detection {
    Detection {
        bbox: BoundingBox {
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.4,
            score: obj * person,
        },
        objectness: obj,
        class_probs: BTreeMap::from([(PERSON, person)]),
    }
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(o, p)| det(o, p)), 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_matches_reference_and_symmetries(c in 1usize..4, h in 2usize..7, w in 2usize..7, seed in any::<u64>(), shift in -0.5f64..0.5) {
        let p = rng::uniform(&[c, h, w], 0.0, 1.0, seed);
        let tv = tv_loss(&p).unwrap();
        prop_assert!(tv >= 0.0);
        prop_assert!((tv - tv_reference(&p)).abs() < 1e-10);
        let shifted = p.map(|v| v + shift);
        prop_assert!((tv_loss(&shifted).unwrap() - tv).abs() < 1e-9);
        let mut tr = Tensor::zeros(&[c, w, h]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    tr.data_mut()[(ch * w + x) * h + y] = p.at3(ch, y, x);
                }
            }
        }
        prop_assert!((tv_loss(&tr).unwrap() - tv).abs() < 1e-9);
        let flat = Tensor::full(&[c, h, w], shift.abs());
        prop_assert!(tv_loss(&flat).unwrap() <= (c * h * w) as f64 * TV_EPS.sqrt() + 1e-15);
    }

    #[test]
    fn detector_loss_ignores_order(mut dets in arb_dets(), seed in any::<u64>()) {
        let before = detector_loss(&dets, PERSON).unwrap();
        use rand::seq::SliceRandom;
        dets.shuffle(&mut rng::rng(seed));
        prop_assert_eq!(detector_loss(&dets, PERSON).unwrap(), before);
    }

    #[test]
    fn lowering_objectness_lowers_the_loss(dets in arb_dets(), factor in 0.0f64..0.999) {
        let before = detector_loss(&dets, PERSON).unwrap();
        let lowered: Vec<Detection> = dets.iter().map(|d| det(d.objectness * factor, d.class_probs[&PERSON])).collect();
        let after = detector_loss(&lowered, PERSON).unwrap();
        if before > 0.0 {
            prop_assert!(after < before);
        } else {
            prop_assert_eq!(after, 0.0);
        }
    }
}

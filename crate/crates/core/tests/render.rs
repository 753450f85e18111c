mod common;

use common::{central_difference, rel_err};
use patchsmith::autograd::Graph;
use patchsmith::render::*;
use patchsmith::tensor::resize_bilinear;
use patchsmith::{rng, Tensor};
use proptest::prelude::*;

fn bbox(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox { cx, cy, w, h, score: 1.0 }
}

fn scene(boxes: &[BoundingBox], seed: u64) -> SceneSample {
    SceneSample::new(rng::uniform(&[3, 32, 40], 0.0, 1.0, seed), boxes, "s").unwrap()
}

/// Pastes the resized patch box by box, later boxes on top.
fn brute_force_paste(scene: &SceneSample, patch: &Tensor, policy: &PlacementPolicy) -> Tensor {
    let (c, h, w) = scene.image.chw().unwrap();
    let (_, ph, pw) = patch.chw().unwrap();
    let mut out = scene.image.clone();
    for b in &scene.boxes {
        let r = patch_rect(b, h, w, ph, pw, policy);
        let resized = resize_bilinear(patch, r.height, r.width).unwrap();
        for ch in 0..c {
            for ry in 0..r.height {
                for rx in 0..r.width {
                    let (y, x) = (r.top + ry as i64, r.left + rx as i64);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        out.data_mut()[(ch * h + y as usize) * w + x as usize] = resized.at3(ch, ry, rx);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn overlapping_boxes_match_the_brute_force_compositor() {
    let boxes = [bbox(0.4, 0.5, 0.4, 0.7), bbox(0.55, 0.55, 0.4, 0.7)];
    let s = scene(&boxes, 1);
    let patch = rng::uniform(&[3, 8, 8], 0.0, 1.0, 2);
    let policy = PlacementPolicy::default();
    let got = place_patch(&s, &patch, &policy).unwrap().image;
    let want = brute_force_paste(&s, &patch, &policy);
    assert!(got.max_abs_diff(&want) < 1e-12);
    // the overlap really exists and belongs to the second box
    let r0 = patch_rect(&boxes[0], 32, 40, 8, 8, &policy);
    let r1 = patch_rect(&boxes[1], 32, 40, 8, 8, &policy);
    assert!(r0.left + r0.width as i64 > r1.left && r0.top + r0.height as i64 > r1.top);
}

#[test]
fn boxes_at_the_border_are_clipped() {
    let s = scene(&[bbox(0.02, 0.5, 0.3, 0.9)], 3);
    let patch = rng::uniform(&[3, 6, 6], 0.0, 1.0, 4);
    let policy = PlacementPolicy::full_box();
    let got = place_patch(&s, &patch, &policy).unwrap().image;
    assert!(got.max_abs_diff(&brute_force_paste(&s, &patch, &policy)) < 1e-12);
}

#[test]
fn contrast_draws_average_to_the_range_midpoint() {
    let ranges = TransformRanges::default();
    let n = 10_000;
    let mean = (0..n)
        .map(|i| sample_transform(&ranges, rng::derive(5, i)).unwrap().contrast_gain)
        .sum::<f64>()
        / n as f64;
    assert!((mean - 1.0).abs() < 0.005, "{mean}");
}

#[test]
fn render_is_reproducible_and_identity_without_boxes() {
    let s = scene(&[bbox(0.5, 0.5, 0.4, 0.8)], 6);
    let patch = rng::uniform(&[3, 8, 8], 0.0, 1.0, 7);
    let r = TransformRanges::default();
    let p = PlacementPolicy::default();
    let a = render_scene(&s, &patch, &r, 9, &p).unwrap();
    let b = render_scene(&s, &patch, &r, 9, &p).unwrap();
    assert_eq!(a.image, b.image);
    assert_ne!(render_scene(&s, &patch, &r, 10, &p).unwrap().image, a.image);
    let empty = scene(&[], 6);
    assert_eq!(render_scene(&empty, &patch, &TransformRanges::identity(), 1, &p).unwrap().image, empty.image);
}

#[test]
fn composite_gradients_match_finite_differences() {
    let s = scene(&[bbox(0.5, 0.5, 0.5, 0.9)], 8);
    // keep the patch away from the clamp boundaries
    let patch = rng::uniform(&[3, 6, 6], 0.3, 0.7, 9);
    let ranges = TransformRanges {
        noise: (0.0, 0.0),
        brightness: (-0.05, 0.05),
        ..TransformRanges::default()
    };
    let policy = PlacementPolicy::default();
    let seed = 4;
    let weights = rng::uniform(&[3, 32, 40], -1.0, 1.0, 10);
    let f = |p: &Tensor| -> f64 {
        let img = render_scene(&s, p, &ranges, seed, &policy).unwrap().image;
        img.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let pv = g.param(patch.clone());
    let img = render_scene_graph(&mut g, &s, pv, &ranges, seed, &policy).unwrap();
    let wv = g.constant(weights.clone());
    let prod = g.mul(img, wv).unwrap();
    let total = g.sum(prod);
    let grad = g.backward(total).get_or_zeros(pv);
    for i in [0, 7, 20, 35, 50, 71, 100] {
        let fd = central_difference(&f, &patch, i, 1e-6);
        assert!(rel_err(grad.data()[i], fd, 1e-6) < 1e-3, "pixel {i}: {} vs {fd}", grad.data()[i]);
    }
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.1f64..0.9, 0.1f64..0.9, 0.1f64..0.6, 0.2f64..0.9).prop_map(|(cx, cy, w, h)| bbox(cx, cy, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_transforms_stay_in_range(seed in any::<u64>(), lo in -0.3f64..0.0, span in 0.0f64..0.6) {
        let ranges = TransformRanges {
            brightness: (lo, lo + span),
            contrast: (0.5, 0.5 + span),
            noise: (0.0, span / 4.0),
            rotation_deg: (-30.0 * span, 30.0 * span),
            scale: (0.8, 0.8 + span),
        };
        let p = sample_transform(&ranges, seed).unwrap();
        prop_assert!(p.brightness_shift >= ranges.brightness.0 && p.brightness_shift <= ranges.brightness.1);
        prop_assert!(p.contrast_gain >= ranges.contrast.0 && p.contrast_gain <= ranges.contrast.1);
        prop_assert!(p.noise_amplitude >= ranges.noise.0 && p.noise_amplitude <= ranges.noise.1);
        prop_assert!(p.rotation_deg >= ranges.rotation_deg.0 && p.rotation_deg <= ranges.rotation_deg.1);
        prop_assert!(p.scale_jitter >= ranges.scale.0 && p.scale_jitter <= ranges.scale.1);
        prop_assert_eq!(p, sample_transform(&ranges, seed).unwrap());
    }

    #[test]
    fn rendering_is_in_range_and_local(boxes in prop::collection::vec(arb_box(), 0..4), seed in any::<u64>()) {
        let s = scene(&boxes, seed % 97);
        let patch = rng::uniform(&[3, 8, 8], -0.5, 1.5, seed);
        let policy = PlacementPolicy::default();
        let out = render_scene(&s, &patch, &TransformRanges::default(), seed, &policy).unwrap().image;
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (_, h, w) = s.image.chw().unwrap();
        let mut covered = vec![false; h * w];
        for b in &s.boxes {
            let r = patch_rect(b, h, w, 8, 8, &policy);
            for y in r.top.max(0)..(r.top + r.height as i64).min(h as i64) {
                for x in r.left.max(0)..(r.left + r.width as i64).min(w as i64) {
                    covered[y as usize * w + x as usize] = true;
                }
            }
        }
        for (i, (a, b)) in out.data().iter().zip(s.image.data()).enumerate() {
            if !covered[i % (h * w)] {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

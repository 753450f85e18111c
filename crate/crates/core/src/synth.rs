//! Procedural data for the desk-scale stack: labelled texture images for the
//! toy generator and pedestrian-like scenes for the toy detector.

use crate::render::{BoundingBox, SceneSample};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::f64::consts::PI;

/// Texture families the toy generator is trained on, by label index.
pub const TEXTURE_LABELS: [&str; 2] = ["stripes", "checker"];

/// A `[3, size, size]` texture of family `label` (see [`TEXTURE_LABELS`]):
/// warm sinusoidal stripes (0) or a cool soft checkerboard (1).
pub fn texture(label: usize, size: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let mut color = |lo: [f64; 3], hi: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| r.random_range(lo[i]..=hi[i]))
    };
    let (c1, c2) = if label == 0 {
        (
            color([0.75, 0.35, 0.0], [1.0, 0.7, 0.3]),
            color([0.45, 0.05, 0.0], [0.75, 0.35, 0.2]),
        )
    } else {
        (
            color([0.0, 0.45, 0.65], [0.3, 0.8, 1.0]),
            color([0.0, 0.1, 0.3], [0.2, 0.4, 0.6]),
        )
    };
    let theta = r.random_range(0.0..PI);
    let freq = r.random_range(1.5..3.5);
    let phase = r.random_range(0.0..2.0 * PI);
    let (st, ct) = theta.sin_cos();
    let n = size as f64;
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let mix = if label == 0 {
                0.5 + 0.5 * (2.0 * PI * freq * (u * ct + v * st) + phase).sin()
            } else {
                let a = (2.0 * PI * freq * (u * ct + v * st) + phase).sin();
                let b = (2.0 * PI * freq * (-u * st + v * ct) + phase).sin();
                0.5 + 0.5 * (3.0 * a * b).tanh()
            };
            for c in 0..3 {
                data[(c * size + y) * size + x] = mix * c1[c] + (1.0 - mix) * c2[c];
            }
        }
    }
    Tensor::new(&[3, size, size], data)
}

/// `per_label` textures of every family, with their labels.
pub fn texture_set(per_label: usize, size: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut out = Vec::with_capacity(per_label * TEXTURE_LABELS.len());
    for label in 0..TEXTURE_LABELS.len() {
        for i in 0..per_label {
            let s = rng::derive(rng::derive(seed, label as u64), i as u64);
            out.push((texture(label, size, s), label));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub max_people: usize,
    /// Probability that a scene has no people at all.
    pub empty_prob: f64,
    /// Person height range as a fraction of the scene side.
    pub height: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            max_people: 2,
            empty_prob: 0.1,
            height: (0.45, 0.75),
        }
    }
}

/// Person width as a fraction of its height.
const ASPECT: f64 = 0.42;

fn background(size: usize, r: &mut impl Rng) -> Vec<f64> {
    let base: [f64; 3] = [
        r.random_range(0.3..0.6),
        r.random_range(0.3..0.6),
        r.random_range(0.25..0.5),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.5..3.0),
                r.random_range(0.0..PI),
                r.random_range(0.0..2.0 * PI),
                r.random_range(0.03..0.1),
            )
        })
        .collect();
    let n = size as f64;
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let tex: f64 = waves
                .iter()
                .map(|&(f, th, ph, a)| a * (2.0 * PI * f * (u * th.cos() + v * th.sin()) + ph).sin())
                .sum();
            for (c, b) in base.iter().enumerate() {
                let grain = r.random_range(-0.03..0.03);
                data[(c * size + y) * size + x] = (b + tex * (1.0 + 0.3 * c as f64) + grain).clamp(0.0, 1.0);
            }
        }
    }
    data
}

fn paint(data: &mut [f64], size: usize, x: usize, y: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        data[(c * size + y) * size + x] = *v;
    }
}

/// Draws a stick-figure person (head, torso, legs) filling `[x0, x1) x
/// [y0, y1)` in pixels.
fn draw_person(data: &mut [f64], size: usize, (x0, y0, x1, y1): (f64, f64, f64, f64), r: &mut impl Rng) {
    let h = y1 - y0;
    let w = x1 - x0;
    let cx = 0.5 * (x0 + x1);
    let skin = [
        r.random_range(0.75..0.95),
        r.random_range(0.5..0.7),
        r.random_range(0.35..0.55),
    ];
    let shirt = {
        let hue = r.random_range(0..3);
        let hi = r.random_range(0.75..0.95);
        let lo = r.random_range(0.05..0.2);
        let mut c = [lo; 3];
        c[hue] = hi;
        c
    };
    let pants = {
        let v = r.random_range(0.08..0.25);
        [v, v, v + r.random_range(0.0..0.15)]
    };
    let head_r = 0.11 * h;
    let head_cy = y0 + head_r;
    for y in (y0.floor() as usize)..(y1.ceil() as usize).min(size) {
        for x in (x0.floor() as usize)..(x1.ceil() as usize).min(size) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < x0 || px >= x1 || py < y0 || py >= y1 {
                continue;
            }
            let rel = (py - y0) / h;
            if (px - cx).powi(2) + (py - head_cy).powi(2) <= head_r * head_r {
                paint(data, size, x, y, skin);
            } else if (0.22..0.62).contains(&rel) {
                paint(data, size, x, y, shirt);
            } else if rel >= 0.62 {
                // two legs with a gap in the middle
                let off = (px - cx).abs() / (0.5 * w);
                if (0.12..0.8).contains(&off) {
                    paint(data, size, x, y, pants);
                }
            }
        }
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox, margin: f64) -> bool {
    (a.cx - b.cx).abs() < 0.5 * (a.w + b.w) + margin && (a.cy - b.cy).abs() < 0.5 * (a.h + b.h) + margin
}

/// One synthetic scene with ground-truth person boxes.
pub fn scene(spec: &SceneSpec, seed: u64) -> SceneSample {
    let mut r = rng::rng(seed);
    let size = spec.size;
    let mut data = background(size, &mut r);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    let count = if r.random_bool(spec.empty_prob) {
        0
    } else {
        r.random_range(1..=spec.max_people)
    };
    let n = size as f64;
    for _ in 0..count {
        for _attempt in 0..20 {
            let hp = r.random_range(spec.height.0..spec.height.1) * n;
            let hp = hp.round();
            let wp = (ASPECT * hp).round();
            let x0 = r.random_range(1.0..(n - wp - 1.0)).floor();
            let y0 = r.random_range(1.0..(n - hp - 1.0)).floor();
            let b = BoundingBox::from_corners(x0 / n, y0 / n, (x0 + wp) / n, (y0 + hp) / n, 1.0);
            if boxes.iter().any(|o| overlaps(o, &b, 0.02)) {
                continue;
            }
            draw_person(&mut data, size, (x0, y0, x0 + wp, y0 + hp), &mut r);
            boxes.push(b);
            break;
        }
    }
    SceneSample {
        image: Tensor::new(&[3, size, size], data),
        boxes,
        source_id: format!("synthetic-{seed:016x}"),
    }
}

/// `count` scenes with seeds derived from `seed`.
pub fn scenes(spec: &SceneSpec, count: usize, seed: u64) -> Vec<SceneSample> {
    (0..count)
        .map(|i| scene(spec, rng::derive(seed, i as u64)))
        .collect()
}

/// A random shirt print for detector training: noise, a texture from either
/// family, or a flat color.
pub fn occluder(size: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    match r.random_range(0..4) {
        0 => noise_patch(&[3, size, size], rng::derive(seed, 1)),
        1 | 2 => texture(r.random_range(0..TEXTURE_LABELS.len()), size, rng::derive(seed, 2)),
        _ => {
            let c: [f64; 3] = std::array::from_fn(|_| r.random_range(0.0..=1.0));
            Tensor::from_fn(&[3, size, size], |i| c[i / (size * size)])
        }
    }
}

/// Uniform random pixels, the random-noise patch baseline.
pub fn noise_patch(shape: &[usize], seed: u64) -> Tensor {
    rng::uniform(shape, 0.0, 1.0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let spec = SceneSpec::default();
        let a = scene(&spec, 3);
        let b = scene(&spec, 3);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for bx in &a.boxes {
            assert!(bx.x0() >= 0.0 && bx.x1() <= 1.0 && bx.y0() >= 0.0 && bx.y1() <= 1.0);
        }
    }

    #[test]
    fn textures_are_in_range() {
        for (t, _) in texture_set(3, 16, 1) {
            assert_eq!(t.shape(), &[3, 16, 16]);
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

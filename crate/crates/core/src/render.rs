//! Physical-condition transforms and scene composition.
//!
//! A patch is first color-jittered and noised, then rotated and rescaled in
//! its own frame, and finally pasted (opaque overwrite) onto the torso of
//! every person box. Everything after the color clamp is linear in the patch
//! pixels, so the composite is differentiable with respect to the patch
//! wherever the clamp is inactive.

use crate::autograd::{Graph, Var};
use crate::error::{ensure_shape, Error, Result};
use crate::rng;
use crate::sparse::{resize_taps, SparseMap};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
            score,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the box to the unit square. `None` when nothing with positive
    /// area remains.
    pub fn clamped(&self) -> Option<Self> {
        let x0 = self.x0().clamp(0.0, 1.0);
        let x1 = self.x1().clamp(0.0, 1.0);
        let y0 = self.y0().clamp(0.0, 1.0);
        let y1 = self.y1().clamp(0.0, 1.0);
        (x1 > x0 && y1 > y0).then(|| Self::from_corners(x0, y0, x1, y1, self.score.clamp(0.0, 1.0)))
    }
}

/// An image with the person boxes to patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub source_id: String,
}

impl SceneSample {
    /// Builds a scene, clamping boxes into the image and dropping empty ones.
    pub fn new(image: Tensor, boxes: &[BoundingBox], source_id: impl Into<String>) -> Result<Self> {
        image.chw()?;
        Ok(Self {
            image,
            boxes: boxes.iter().filter_map(BoundingBox::clamped).collect(),
            source_id: source_id.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub brightness_shift: f64,
    pub contrast_gain: f64,
    pub noise_amplitude: f64,
    pub rotation_deg: f64,
    pub scale_jitter: f64,
    pub seed: u64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            brightness_shift: 0.0,
            contrast_gain: 1.0,
            noise_amplitude: 0.0,
            rotation_deg: 0.0,
            scale_jitter: 1.0,
            seed: 0,
        }
    }
}

/// Closed sampling intervals for each transform parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub noise: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            noise: (0.0, 0.05),
            rotation_deg: (-20.0, 20.0),
            scale: (0.9, 1.1),
        }
    }
}

impl TransformRanges {
    pub fn identity() -> Self {
        Self {
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            noise: (0.0, 0.0),
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise", self.noise),
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
        ];
        for (name, (lo, hi)) in named {
            if !(lo <= hi) {
                return Err(Error::InvalidParameter(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.contrast.0 <= 0.0 || self.scale.0 <= 0.0 || self.noise.0 < 0.0 {
            return Err(Error::InvalidParameter(
                "contrast and scale must be positive, noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn sample_transform(ranges: &TransformRanges, seed: u64) -> Result<TransformParams> {
    ranges.validate()?;
    let mut r = rng::rng(seed);
    let mut draw = |(lo, hi): (f64, f64)| {
        let u: f64 = r.random();
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * u
        }
    };
    Ok(TransformParams {
        brightness_shift: draw(ranges.brightness),
        contrast_gain: draw(ranges.contrast),
        noise_amplitude: draw(ranges.noise),
        rotation_deg: draw(ranges.rotation_deg),
        scale_jitter: draw(ranges.scale),
        seed: rng::derive_named(seed, "pixel-noise"),
    })
}

fn is_identity_geometry(p: &TransformParams) -> bool {
    p.rotation_deg == 0.0 && p.scale_jitter == 1.0
}

pub fn apply_transform_graph(g: &mut Graph, patch: Var, params: &TransformParams) -> Result<Var> {
    let shape = g.shape(patch).to_vec();
    let (c, h, w) = g.value(patch).chw()?;
    let shift = 0.5 - 0.5 * params.contrast_gain + params.brightness_shift;
    let mut x = g.affine(patch, params.contrast_gain, shift);
    if params.noise_amplitude > 0.0 {
        let a = params.noise_amplitude;
        let noise = g.constant(rng::uniform(&shape, -a, a, params.seed));
        x = g.add(x, noise)?;
    }
    x = g.clamp(x, 0.0, 1.0);
    if is_identity_geometry(params) {
        return Ok(x);
    }
    let map = Rc::new(SparseMap::rotate_scale(c, h, w, params.rotation_deg, params.scale_jitter));
    g.linear_map(x, map, &shape)
}

pub fn apply_transform(patch: &Tensor, params: &TransformParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(patch.clone());
    let out = apply_transform_graph(&mut g, p, params)?;
    Ok(g.value(out).clone())
}

/// Where on a person box the patch goes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    /// Patch width as a fraction of the box width.
    pub width_frac: f64,
    /// Patch height as a fraction of the box height; `None` keeps the
    /// patch aspect ratio.
    pub height_frac: Option<f64>,
    /// Vertical patch center, as a fraction of box height from the top.
    pub vertical_center: f64,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self {
            width_frac: 0.65,
            height_frac: None,
            vertical_center: 0.45,
        }
    }
}

impl PlacementPolicy {
    /// Covers the whole box.
    pub fn full_box() -> Self {
        Self {
            width_frac: 1.0,
            height_frac: Some(1.0),
            vertical_center: 0.5,
        }
    }
}

/// Pixel rectangle (may extend past the image) the patch is resized into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub left: i64,
    pub top: i64,
    pub width: usize,
    pub height: usize,
}

pub fn patch_rect(b: &BoundingBox, img_h: usize, img_w: usize, patch_h: usize, patch_w: usize, policy: &PlacementPolicy) -> PatchRect {
    let (bw, bh) = (b.w * img_w as f64, b.h * img_h as f64);
    let width = (policy.width_frac * bw).round().max(1.0);
    let height = match policy.height_frac {
        Some(f) => (f * bh).round(),
        None => (width * patch_h as f64 / patch_w as f64).round(),
    }
    .max(1.0);
    let cx = b.cx * img_w as f64;
    let cy = b.y0() * img_h as f64 + policy.vertical_center * bh;
    PatchRect {
        left: (cx - 0.5 * width).round() as i64,
        top: (cy - 0.5 * height).round() as i64,
        width: width as usize,
        height: height as usize,
    }
}

/// The linear map from patch pixels into the image plus the keep mask of
/// untouched pixels. Later boxes overwrite earlier ones.
pub fn composite_map(
    img_shape: &[usize],
    patch_shape: &[usize],
    boxes: &[BoundingBox],
    policy: &PlacementPolicy,
) -> Result<(SparseMap, Vec<f64>)> {
    let &[c, h, w] = img_shape else {
        return Err(Error::ShapeMismatch {
            expected: vec![3, 0, 0],
            got: img_shape.to_vec(),
        });
    };
    let &[pc, ph, pw] = patch_shape else {
        return Err(Error::ShapeMismatch {
            expected: vec![c, 0, 0],
            got: patch_shape.to_vec(),
        });
    };
    ensure_shape(&[c], &[pc])?;
    let rects: Vec<PatchRect> = boxes.iter().map(|b| patch_rect(b, h, w, ph, pw, policy)).collect();
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (k, r) in rects.iter().enumerate() {
        let ys = r.top.max(0)..(r.top + r.height as i64).min(h as i64);
        let xs = r.left.max(0)..(r.left + r.width as i64).min(w as i64);
        for y in ys {
            for x in xs.clone() {
                owner[y as usize * w + x as usize] = Some(k);
            }
        }
    }
    let keep: Vec<f64> = (0..c * h * w)
        .map(|i| if owner[i % (h * w)].is_some() { 0.0 } else { 1.0 })
        .collect();
    let map = SparseMap::from_rows(c * h * w, c * ph * pw, |i, push| {
        let pix = i % (h * w);
        let Some(k) = owner[pix] else { return };
        let ch = i / (h * w);
        let r = rects[k];
        let ry = ((pix / w) as i64 - r.top) as usize;
        let rx = ((pix % w) as i64 - r.left) as usize;
        resize_taps(ph, pw, r.height, r.width, ry, rx, |yy, xx, wt| push((ch * ph + yy) * pw + xx, wt));
    });
    Ok((map, keep))
}

pub fn place_patch_graph(
    g: &mut Graph,
    image: Var,
    boxes: &[BoundingBox],
    patch: Var,
    policy: &PlacementPolicy,
) -> Result<Var> {
    if boxes.is_empty() {
        return Ok(image);
    }
    let (map, keep) = composite_map(g.shape(image), g.shape(patch), boxes, policy)?;
    let out = g.composite(image, Rc::new(keep), patch, Rc::new(map))?;
    Ok(g.clamp(out, 0.0, 1.0))
}

pub fn place_patch(scene: &SceneSample, patch: &Tensor, policy: &PlacementPolicy) -> Result<SceneSample> {
    let mut g = Graph::new();
    let img = g.constant(scene.image.clone());
    let p = g.constant(patch.clone());
    let out = place_patch_graph(&mut g, img, &scene.boxes, p, policy)?;
    Ok(SceneSample {
        image: g.value(out).clone(),
        boxes: scene.boxes.clone(),
        source_id: scene.source_id.clone(),
    })
}

pub fn render_scene_graph(
    g: &mut Graph,
    scene: &SceneSample,
    patch: Var,
    ranges: &TransformRanges,
    seed: u64,
    policy: &PlacementPolicy,
) -> Result<Var> {
    let params = sample_transform(ranges, seed)?;
    let img = g.constant(scene.image.clone());
    if scene.boxes.is_empty() {
        return Ok(img);
    }
    let transformed = apply_transform_graph(g, patch, &params)?;
    place_patch_graph(g, img, &scene.boxes, transformed, policy)
}

pub fn render_scene(
    scene: &SceneSample,
    patch: &Tensor,
    ranges: &TransformRanges,
    seed: u64,
    policy: &PlacementPolicy,
) -> Result<SceneSample> {
    let mut g = Graph::new();
    let p = g.constant(patch.clone());
    let out = render_scene_graph(&mut g, scene, p, ranges, seed, policy)?;
    Ok(SceneSample {
        image: g.value(out).clone(),
        boxes: scene.boxes.clone(),
        source_id: scene.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::resize_bilinear;

    fn scene_with(boxes: &[BoundingBox]) -> SceneSample {
        SceneSample::new(rng::uniform(&[3, 20, 24], 0.0, 1.0, 1), boxes, "t").unwrap()
    }

    #[test]
    fn degenerate_ranges_give_exact_values() {
        let ranges = TransformRanges {
            brightness: (0.05, 0.05),
            contrast: (1.1, 1.1),
            noise: (0.01, 0.01),
            rotation_deg: (3.0, 3.0),
            scale: (0.95, 0.95),
        };
        let p = sample_transform(&ranges, 4).unwrap();
        assert_eq!(
            (p.brightness_shift, p.contrast_gain, p.noise_amplitude, p.rotation_deg, p.scale_jitter),
            (0.05, 1.1, 0.01, 3.0, 0.95)
        );
        assert_eq!(p, sample_transform(&ranges, 4).unwrap());
    }

    #[test]
    fn inverted_ranges_are_rejected() {
        let ranges = TransformRanges {
            contrast: (1.2, 0.8),
            ..Default::default()
        };
        assert!(sample_transform(&ranges, 0).is_err());
    }

    #[test]
    fn identity_transform_is_a_no_op() {
        let patch = rng::uniform(&[3, 8, 8], 0.0, 1.0, 2);
        assert_eq!(apply_transform(&patch, &TransformParams::identity()).unwrap(), patch);
    }

    #[test]
    fn brightness_shift_on_constant_patch() {
        let patch = Tensor::full(&[3, 4, 4], 0.5);
        let params = TransformParams {
            brightness_shift: 0.1,
            ..TransformParams::identity()
        };
        let out = apply_transform(&patch, &params).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn two_half_turns_restore_the_patch() {
        let patch = rng::uniform(&[3, 9, 9], 0.0, 1.0, 3);
        let half = TransformParams {
            rotation_deg: 180.0,
            ..TransformParams::identity()
        };
        let once = apply_transform(&patch, &half).unwrap();
        let twice = apply_transform(&once, &half).unwrap();
        assert!(twice.max_abs_diff(&patch) < 1e-2);
    }

    #[test]
    fn zero_boxes_leave_the_scene_untouched() {
        let s = scene_with(&[]);
        let patch = Tensor::full(&[3, 4, 4], 0.0);
        assert_eq!(place_patch(&s, &patch, &PlacementPolicy::default()).unwrap(), s);
        let r = render_scene(&s, &patch, &TransformRanges::identity(), 3, &PlacementPolicy::default()).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn full_box_paste_equals_resized_patch() {
        let s = scene_with(&[BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0, 1.0)]);
        let patch = rng::uniform(&[3, 7, 5], 0.0, 1.0, 9);
        let out = place_patch(&s, &patch, &PlacementPolicy::full_box()).unwrap();
        assert_eq!(out.image, resize_bilinear(&patch, 20, 24).unwrap());
    }

    #[test]
    fn pixels_outside_the_paste_are_bit_identical() {
        let s = scene_with(&[BoundingBox::from_corners(0.1, 0.2, 0.4, 0.9, 1.0)]);
        let patch = Tensor::full(&[3, 6, 6], 0.0);
        let out = place_patch(&s, &patch, &PlacementPolicy::default()).unwrap();
        let (_, keep) = composite_map(s.image.shape(), patch.shape(), &s.boxes, &PlacementPolicy::default()).unwrap();
        let mut changed = 0;
        for i in 0..keep.len() {
            if keep[i] == 1.0 {
                assert_eq!(out.image.data()[i].to_bits(), s.image.data()[i].to_bits());
            } else {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }
}

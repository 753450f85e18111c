//! Browser demo: three small views onto the patchsmith pipeline.
//!
//! * forward diffusion of a toy texture, with the time indices APS visits
//! * a synthetic scene with a texture patch rendered under random transforms
//! * average precision of hand-entered boxes
//!
//! Images cross the boundary as RGBA bytes, row major.

use patchsmith::diffusion::{aps_timesteps, forward_diffuse, LatentState, NoiseSchedule};
use patchsmith::eval::{average_precision, ApMethod, ImageDetections};
use patchsmith::generator::{ConditionRef, GenerationCodec, ScaledCodec, DEFAULT_LATENT_SCALE};
use patchsmith::render::{render_scene, BoundingBox, PlacementPolicy, TransformRanges};
use patchsmith::{rng, synth, Tensor};
use wasm_bindgen::prelude::*;

pub const PATCH_SIZE: usize = 16;
pub const SCENE_SIZE: usize = 64;

fn rgba(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = d[(ch.min(c - 1)) * h * w + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn label(l: u32) -> Result<usize, String> {
    let l = l as usize;
    if l < synth::TEXTURE_LABELS.len() {
        Ok(l)
    } else {
        Err(format!("texture label must be below {}", synth::TEXTURE_LABELS.len()))
    }
}

fn texture(l: u32, seed: u32) -> Result<Tensor, String> {
    Ok(synth::texture(label(l)?, PATCH_SIZE, seed as u64))
}

/// The texture noised to step `t` in the scaled latent space, decoded back
/// to a 16x16 RGBA image. `t = 0` is the clean texture.
#[wasm_bindgen]
pub fn diffuse_texture(texture_label: u32, seed: u32, t: u32) -> Result<Vec<u8>, String> {
    let sched = NoiseSchedule::default();
    let codec = ScaledCodec::new(&[3, PATCH_SIZE, PATCH_SIZE], DEFAULT_LATENT_SCALE).map_err(|e| e.to_string())?;
    let tex = texture(texture_label, seed)?;
    if t == 0 {
        return Ok(rgba(&tex));
    }
    let x0 = LatentState::clean(codec.encode(&tex).map_err(|e| e.to_string())?, ConditionRef::unconditional());
    let noise = rng::gaussian(x0.value.shape(), rng::derive_named(seed as u64, "demo-noise"));
    let xt = forward_diffuse(&x0, t as usize, &noise, &sched).map_err(|e| e.to_string())?;
    Ok(rgba(&codec.decode(&xt.value).map_err(|e| e.to_string())?))
}

/// The time indices at which APS calls the noise predictor.
#[wasm_bindgen]
pub fn aps_steps(t_start: u32, step: u32) -> Result<Vec<u32>, String> {
    if step == 0 || t_start == 0 || t_start as usize > NoiseSchedule::default().steps() {
        return Err("need 1 <= t_start <= 1000 and s >= 1".into());
    }
    Ok(aps_timesteps(t_start as usize, step as usize).into_iter().map(|t| t as u32).collect())
}

/// A 64x64 synthetic scene with a texture patch on every person, under
/// transforms drawn from the default ranges (or none when `jitter` is off).
#[wasm_bindgen]
pub fn render_patched_scene(
    scene_seed: u32,
    texture_label: u32,
    texture_seed: u32,
    width_frac: f64,
    transform_seed: u32,
    jitter: bool,
) -> Result<Vec<u8>, String> {
    if !(width_frac > 0.0 && width_frac <= 1.0) {
        return Err("width fraction must lie in (0, 1]".into());
    }
    let spec = synth::SceneSpec {
        size: SCENE_SIZE,
        ..synth::SceneSpec::default()
    };
    let scene = synth::scene(&spec, scene_seed as u64);
    let patch = texture(texture_label, texture_seed)?;
    let ranges = if jitter {
        TransformRanges::default()
    } else {
        TransformRanges::identity()
    };
    let policy = PlacementPolicy {
        width_frac,
        ..PlacementPolicy::default()
    };
    let out = render_scene(&scene, &patch, &ranges, transform_seed as u64, &policy).map_err(|e| e.to_string())?;
    Ok(rgba(&out.image))
}

/// Average precision of detections against ground truth. Boxes are flat
/// `[image, cx, cy, w, h]` records for ground truth and
/// `[image, cx, cy, w, h, score]` for detections, in normalized
/// coordinates.
#[wasm_bindgen]
pub fn average_precision_of(ground_truth: &[f64], detections: &[f64], iou: f64, all_point: bool) -> Result<f64, String> {
    if ground_truth.len() % 5 != 0 || detections.len() % 6 != 0 {
        return Err("ground truth records have 5 numbers, detections 6".into());
    }
    let image_of = |v: f64| -> Result<usize, String> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e6 {
            Ok(v as usize)
        } else {
            Err(format!("bad image index {v}"))
        }
    };
    let mut images: Vec<ImageDetections> = Vec::new();
    fn slot(images: &mut Vec<ImageDetections>, i: usize) -> &mut ImageDetections {
        while images.len() <= i {
            images.push(ImageDetections {
                ground_truth: vec![],
                detections: vec![],
            });
        }
        &mut images[i]
    }
    for r in ground_truth.chunks(5) {
        let b = BoundingBox {
            cx: r[1],
            cy: r[2],
            w: r[3],
            h: r[4],
            score: 1.0,
        };
        slot(&mut images, image_of(r[0])?).ground_truth.push(b);
    }
    for r in detections.chunks(6) {
        let b = BoundingBox {
            cx: r[1],
            cy: r[2],
            w: r[3],
            h: r[4],
            score: r[5],
        };
        slot(&mut images, image_of(r[0])?).detections.push(b);
    }
    let method = if all_point {
        ApMethod::AllPoint
    } else {
        ApMethod::ElevenPoint
    };
    Ok(average_precision(&images, iou, method))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_diffusion_is_the_texture() {
        let img = diffuse_texture(0, 3, 0).unwrap();
        assert_eq!(img.len(), 4 * PATCH_SIZE * PATCH_SIZE);
        assert_eq!(img, rgba(&synth::texture(0, PATCH_SIZE, 3)));
        assert_ne!(diffuse_texture(0, 3, 500).unwrap(), img);
        assert!(diffuse_texture(7, 3, 0).is_err());
    }

    #[test]
    fn aps_schedule_matches_three_calls() {
        assert_eq!(aps_steps(500, 166).unwrap(), vec![500, 334, 168]);
        assert!(aps_steps(500, 0).is_err());
    }

    #[test]
    fn rendered_scene_has_scene_size() {
        let img = render_patched_scene(1, 1, 2, 0.6, 3, true).unwrap();
        assert_eq!(img.len(), 4 * SCENE_SIZE * SCENE_SIZE);
        assert!(render_patched_scene(1, 1, 2, 0.0, 3, true).is_err());
    }

    #[test]
    fn perfect_and_missed_detections() {
        let gt = [0.0, 0.5, 0.5, 0.2, 0.4];
        let hit = [0.0, 0.5, 0.5, 0.2, 0.4, 0.9];
        assert_eq!(average_precision_of(&gt, &hit, 0.5, false).unwrap(), 1.0);
        let miss = [1.0, 0.1, 0.1, 0.05, 0.05, 0.9];
        assert_eq!(average_precision_of(&gt, &miss, 0.5, true).unwrap(), 0.0);
        assert!(average_precision_of(&gt[..4], &hit, 0.5, true).is_err());
    }
}

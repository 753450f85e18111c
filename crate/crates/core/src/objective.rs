//! The attack objective: detector loss, total variation and their batch
//! combination over rendered scenes.

use crate::autograd::{Graph, Var};
use crate::detector::{CandidateScores, ClassId, Detection, Detector, PERSON};
use crate::diffusion::{aps_sample_graph, LatentState, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::generator::{GenerationCodec, NoisePredictor};
use crate::render::{render_scene_graph, PlacementPolicy, SceneSample, TransformRanges};
use crate::rng;
use crate::sparse::SparseMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Smoothing inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_term: f64,
    pub tv_term: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(det_term: f64, tv_term: f64, lambda: f64) -> Self {
        Self {
            det_term,
            tv_term,
            lambda,
            total: det_term + lambda * tv_term,
        }
    }
}

/// Highest `objectness * p(person)` over the detections; 0 when there are
/// none.
pub fn detector_loss(detections: &[Detection], person_class: ClassId) -> Result<f64> {
    let mut best = 0.0f64;
    for d in detections {
        let Some(p) = d.class_probs.get(&person_class) else {
            return Err(Error::InvalidConfig(format!(
                "detections carry no probability for class {person_class}"
            )));
        };
        best = best.max(d.objectness * p);
    }
    Ok(best)
}

/// [`detector_loss`] over raw candidates, before thresholding and NMS.
pub fn detector_loss_graph(g: &mut Graph, scores: &CandidateScores, person_class: ClassId) -> Result<Var> {
    let Some(&(_, cls)) = scores.class_probs.iter().find(|(k, _)| *k == person_class) else {
        return Err(Error::InvalidConfig(format!("detector has no class {person_class}")));
    };
    if g.value(scores.objectness).is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let conf = g.mul(scores.objectness, cls)?;
    Ok(g.max(conf))
}

/// Forward differences to the right and downward neighbors, for every pixel
/// that has both.
fn tv_maps(c: usize, h: usize, w: usize) -> (SparseMap, SparseMap) {
    let (ih, iw) = (h.saturating_sub(1), w.saturating_sub(1));
    let n = c * ih * iw;
    let idx = move |i: usize| {
        let ch = i / (ih * iw);
        let y = (i / iw) % ih;
        let x = i % iw;
        (ch * h + y) * w + x
    };
    let dx = SparseMap::from_rows(n, c * h * w, |i, push| {
        let p = idx(i);
        push(p + 1, 1.0);
        push(p, -1.0);
    });
    let dy = SparseMap::from_rows(n, c * h * w, |i, push| {
        let p = idx(i);
        push(p + w, 1.0);
        push(p, -1.0);
    });
    (dx, dy)
}

fn tv_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                got: shape.to_vec(),
            })
        }
    };
    if c == 0 || h == 0 || w == 0 || (h < 2 && w < 2) {
        return Err(Error::InvalidParameter(format!(
            "TV needs at least two pixels along some axis, got {shape:?}"
        )));
    }
    Ok((c, h, w))
}

/// Isotropic total variation summed over channels. Only pixels with both a
/// right and a lower neighbor contribute, so a single row or column has
/// zero TV.
pub fn tv_loss(patch: &Tensor) -> Result<f64> {
    let (c, h, w) = tv_dims(patch.shape())?;
    let p = patch.data();
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let i = (ch * h + y) * w + x;
                let dx = p[i + 1] - p[i];
                let dy = p[i + w] - p[i];
                total += (dx * dx + dy * dy + TV_EPS).sqrt();
            }
        }
    }
    Ok(total)
}

pub fn tv_loss_graph(g: &mut Graph, patch: Var) -> Result<Var> {
    let (c, h, w) = tv_dims(g.shape(patch))?;
    let (mx, my) = tv_maps(c, h, w);
    let n = mx.out_len();
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let flat = g.reshape(patch, &[c * h * w])?;
    let dx = g.linear_map(flat, Rc::new(mx), &[n])?;
    let dy = g.linear_map(flat, Rc::new(my), &[n])?;
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let s = g.add(dx2, dy2)?;
    let s = g.affine(s, 1.0, TV_EPS);
    let r = g.sqrt(s);
    Ok(g.sum(r))
}

/// The bound components of an attack: generator, codec, victims and the
/// rendering setup.
pub struct AttackStack<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub codec: &'a dyn GenerationCodec,
    pub schedule: &'a NoiseSchedule,
    /// Victim detectors; their losses are averaged.
    pub detectors: Vec<&'a dyn Detector>,
    pub ranges: TransformRanges,
    pub placement: PlacementPolicy,
    pub person_class: ClassId,
}

impl<'a> AttackStack<'a> {
    pub fn new(
        predictor: &'a dyn NoisePredictor,
        codec: &'a dyn GenerationCodec,
        schedule: &'a NoiseSchedule,
        detectors: Vec<&'a dyn Detector>,
    ) -> Self {
        Self {
            predictor,
            codec,
            schedule,
            detectors,
            ranges: TransformRanges::default(),
            placement: PlacementPolicy::default(),
            person_class: PERSON,
        }
    }

    /// Decoded APS resample of `latent` as a graph node.
    pub fn resample_graph(&self, g: &mut Graph, latent: Var, condition: &crate::generator::ConditionRef, sampler: &SamplerConfig) -> Result<Var> {
        let z = aps_sample_graph(g, Some(latent), condition, sampler, self.predictor, self.schedule)
            .map_err(|e| e.in_stage("sample"))?;
        self.codec.decode_graph(g, z).map_err(|e| e.in_stage("sample"))
    }
}

/// Seed of the transform draw for scene `index` under sampler seed `seed`.
pub fn render_seed(seed: u64, index: usize) -> u64 {
    rng::derive(rng::derive_named(seed, "render"), index as u64)
}

/// Anything the patch optimizer can minimize: a loss breakdown of a clean
/// latent over a batch of scenes, optionally with its gradient.
pub trait PatchObjective {
    fn evaluate(
        &self,
        latent: &LatentState,
        scenes: &[SceneSample],
        sampler: &SamplerConfig,
        lambda: f64,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Tensor>)>;

    /// The pixel patch the latent realizes under `sampler`.
    fn resample(&self, latent: &LatentState, sampler: &SamplerConfig) -> Result<Tensor>;
}

impl PatchObjective for AttackStack<'_> {
    fn evaluate(
        &self,
        latent: &LatentState,
        scenes: &[SceneSample],
        sampler: &SamplerConfig,
        lambda: f64,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Tensor>)> {
        if scenes.is_empty() {
            return Err(Error::InvalidParameter("batch objective needs at least one scene".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::InvalidConfig("attack stack has no detectors".into()));
        }
        if latent.t != 0 {
            return Err(Error::InvalidConfig(format!("patch latent must be clean, got t = {}", latent.t)));
        }
        let mut g = Graph::new();
        let x0 = if with_grad {
            g.param(latent.value.clone())
        } else {
            g.constant(latent.value.clone())
        };
        let patch = self.resample_graph(&mut g, x0, &latent.condition, sampler)?;
        let mut per_scene = Vec::with_capacity(scenes.len());
        for (i, scene) in scenes.iter().enumerate() {
            if scene.boxes.is_empty() {
                per_scene.push(g.constant(Tensor::scalar(0.0)));
                continue;
            }
            let img = render_scene_graph(&mut g, scene, patch, &self.ranges, render_seed(sampler.seed, i), &self.placement)
                .map_err(|e| e.in_stage("render"))?;
            let mut losses = Vec::with_capacity(self.detectors.len());
            for det in &self.detectors {
                let scores = det.candidates(&mut g, img).map_err(|e| e.in_stage("detect"))?;
                losses.push(detector_loss_graph(&mut g, &scores, self.person_class).map_err(|e| e.in_stage("detect"))?);
            }
            let all = g.concat(&losses)?;
            per_scene.push(g.mean(all));
        }
        let all = g.concat(&per_scene)?;
        let det = g.mean(all);
        let tv = tv_loss_graph(&mut g, patch)?;
        let total = g.axpby(1.0, det, lambda, tv)?;
        let breakdown = LossBreakdown {
            det_term: g.scalar(det),
            tv_term: g.scalar(tv),
            lambda,
            total: g.scalar(total),
        };
        let grad = with_grad.then(|| g.backward(total).get_or_zeros(x0));
        Ok((breakdown, grad))
    }

    fn resample(&self, latent: &LatentState, sampler: &SamplerConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let x0 = g.constant(latent.value.clone());
        let p = self.resample_graph(&mut g, x0, &latent.condition, sampler)?;
        Ok(g.value(p).clone())
    }
}

/// Mean detector loss over the rendered batch plus `lambda` times the TV of
/// the resampled patch. A scene without person boxes contributes 0.
pub fn batch_objective(
    scenes: &[SceneSample],
    patch_latent: &LatentState,
    sampler_cfg: &SamplerConfig,
    stack: &AttackStack<'_>,
    lambda: f64,
) -> Result<LossBreakdown> {
    stack.evaluate(patch_latent, scenes, sampler_cfg, lambda, false).map(|(b, _)| b)
}

/// [`batch_objective`] and its gradient with respect to the latent value.
pub fn batch_objective_grad(
    scenes: &[SceneSample],
    patch_latent: &LatentState,
    sampler_cfg: &SamplerConfig,
    stack: &AttackStack<'_>,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor)> {
    let (b, g) = stack.evaluate(patch_latent, scenes, sampler_cfg, lambda, true)?;
    Ok((b, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::BoundingBox;
    use std::collections::BTreeMap;

    fn det(obj: f64, person: f64) -> Detection {
        Detection {
            bbox: BoundingBox {
                cx: 0.5,
                cy: 0.5,
                w: 0.1,
                h: 0.1,
                score: obj * person,
            },
            objectness: obj,
            class_probs: BTreeMap::from([(PERSON, person)]),
        }
    }

    #[test]
    fn detector_loss_examples() {
        assert_eq!(detector_loss(&[det(1.0, 1.0)], PERSON).unwrap(), 1.0);
        assert_eq!(detector_loss(&[], PERSON).unwrap(), 0.0);
        let l = detector_loss(&[det(0.9, 0.8), det(0.5, 0.99)], PERSON).unwrap();
        assert_eq!(l, 0.9 * 0.8);
        assert!(detector_loss(&[det(0.9, 0.8)], 7).is_err());
    }

    #[test]
    fn tv_hand_examples() {
        let two = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((tv_loss(&two).unwrap() - (1.0 + TV_EPS).sqrt()).abs() < 1e-12);
        let ramp = Tensor::new(&[1, 1, 4], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(tv_loss(&ramp).unwrap(), 0.0);
        assert!(tv_loss(&Tensor::zeros(&[1, 1, 1])).is_err());
    }

    #[test]
    fn tv_graph_matches_plain() {
        let p = crate::rng::uniform(&[3, 5, 7], 0.0, 1.0, 9);
        let mut g = Graph::new();
        let v = g.param(p.clone());
        let t = tv_loss_graph(&mut g, v).unwrap();
        assert!((g.scalar(t) - tv_loss(&p).unwrap()).abs() < 1e-12);
    }
}

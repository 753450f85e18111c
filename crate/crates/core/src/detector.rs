//! The victim-detector contract and a small trainable single-class detector.

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{ensure_shape, Error, Result};
use crate::eval::{average_precision, ApMethod, ImageDetections};
use crate::nn::{self, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::render::{render_scene, BoundingBox, PlacementPolicy, SceneSample, TransformRanges};
use crate::rng;
use crate::sparse::SparseMap;
use crate::synth::{self, SceneSpec};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

pub type ClassId = usize;

/// Class id of people in every built-in detector.
pub const PERSON: ClassId = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_probs: BTreeMap<ClassId, f64>,
}

impl Detection {
    /// `objectness * p(class)`, zero for classes the detection does not
    /// score.
    pub fn confidence(&self, class: ClassId) -> f64 {
        self.objectness * self.class_probs.get(&class).copied().unwrap_or(0.0)
    }
}

/// Differentiable per-candidate scores before thresholding and NMS.
pub struct CandidateScores {
    /// `[n]` objectness probabilities.
    pub objectness: Var,
    /// `[n]` class probabilities per class.
    pub class_probs: Vec<(ClassId, Var)>,
    /// Decoded candidate boxes (not differentiable).
    pub boxes: Vec<BoundingBox>,
}

pub trait Detector {
    fn id(&self) -> &str;

    /// Side of the square network input; images are resized to it.
    fn input_size(&self) -> usize;

    fn classes(&self) -> &[ClassId];

    /// Candidate scores for a `[3, H, W]` image, differentiable with respect
    /// to its pixels.
    fn candidates(&self, g: &mut Graph, image: Var) -> Result<CandidateScores>;

    /// Detections scoring at least `min_score` for some class, after NMS.
    fn detect(&self, image: &Tensor, min_score: f64) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let c = self.candidates(&mut g, img)?;
        let obj = g.value(c.objectness).data().to_vec();
        let probs: Vec<(ClassId, Vec<f64>)> = c
            .class_probs
            .iter()
            .map(|(k, v)| (*k, g.value(*v).data().to_vec()))
            .collect();
        let mut dets: Vec<Detection> = (0..obj.len())
            .map(|i| Detection {
                bbox: c.boxes[i],
                objectness: obj[i],
                class_probs: probs.iter().map(|(k, p)| (*k, p[i])).collect(),
            })
            .filter(|d| d.class_probs.keys().any(|&k| d.confidence(k) >= min_score))
            .collect();
        for d in &mut dets {
            let best = d.class_probs.keys().map(|&k| d.confidence(k)).fold(0.0, f64::max);
            d.bbox.score = best;
        }
        Ok(nms(dets, NMS_IOU))
    }
}

pub const NMS_IOU: f64 = 0.45;

/// Greedy non-maximum suppression on `bbox.score`; ties keep input order.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.bbox.score.total_cmp(&a.bbox.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

/// Resizes `image` to `size x size` inside the graph when needed.
pub fn fit_input(g: &mut Graph, image: Var, size: usize) -> Result<Var> {
    let (c, h, w) = g.value(image).chw()?;
    if h == size && w == size {
        return Ok(image);
    }
    let map = Rc::new(SparseMap::resize(c, h, w, size, size));
    g.linear_map(image, map, &[c, size, size])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    pub input_size: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scene: SceneSpecConfig,
    /// Probability that a training scene gets a random print pasted on every
    /// person, so that clothing patterns alone do not hide people.
    pub occluder_prob: f64,
    /// Objectness loss weight of cells that own a person, relative to empty
    /// cells.
    pub positive_weight: f64,
    /// Held-out scenes for the acceptance check.
    pub holdout: usize,
    /// Minimum AP@0.5 (fraction) on the holdout split.
    pub min_ap: f64,
    pub seed: u64,
}

/// Serializable mirror of [`SceneSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpecConfig {
    pub max_people: usize,
    pub empty_prob: f64,
    pub height: (f64, f64),
}

impl SceneSpecConfig {
    pub fn spec(&self, size: usize) -> SceneSpec {
        SceneSpec {
            size,
            max_people: self.max_people,
            empty_prob: self.empty_prob,
            height: self.height,
        }
    }
}

impl Default for SceneSpecConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            max_people: s.max_people,
            empty_prob: s.empty_prob,
            height: s.height,
        }
    }
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            width: 24,
            steps: 600,
            batch_size: 12,
            lr: 3e-3,
            scene: SceneSpecConfig::default(),
            occluder_prob: 0.5,
            positive_weight: 5.0,
            holdout: 100,
            min_ap: 0.95,
            seed: 0,
        }
    }
}

const STRIDE: usize = 8;
const ANCHOR_W: f64 = 0.25;
const ANCHOR_H: f64 = 0.6;
const HEAD: usize = 6;
/// Smoothed objectness target for cells that own a person.
const POSITIVE_TARGET: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorWeights {
    pub id: String,
    pub input_size: usize,
    pub width: usize,
    pub params: ParamSet,
    /// AP@0.5 on the held-out split when training finished.
    pub holdout_ap: f64,
}

/// A five-layer fully convolutional single-class detector with one
/// candidate per 8x8 cell.
#[derive(Clone, Debug)]
pub struct ToyDetector {
    weights: ToyDetectorWeights,
    classes: Vec<ClassId>,
}

fn init_params(width: usize, seed: u64) -> ParamSet {
    let layers = [
        (width / 2, 3, 3),
        (width, width / 2, 3),
        (width, width, 3),
        (width, width, 3),
        (width, width, 3),
        (HEAD, width, 1),
    ];
    let tensors = layers
        .iter()
        .enumerate()
        .flat_map(|(i, &(co, ci, k))| nn::conv_params(co, ci, k, 1.0, rng::derive(seed, i as u64)))
        .collect();
    ParamSet { tensors }
}

impl ToyDetector {
    pub fn from_weights(weights: ToyDetectorWeights) -> Self {
        Self {
            weights,
            classes: vec![PERSON],
        }
    }

    pub fn weights(&self) -> &ToyDetectorWeights {
        &self.weights
    }

    pub fn digest(&self) -> String {
        self.weights.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.weights)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_weights(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    fn grid(&self) -> usize {
        self.weights.input_size / STRIDE
    }

    /// Raw head output `[6, G, G]`.
    fn head(&self, g: &mut Graph, p: &[Var], image: Var) -> Result<Var> {
        let x = fit_input(g, image, self.weights.input_size)?;
        let strides = [2, 2, 2, 1, 1];
        let mut h = x;
        for (l, &s) in strides.iter().enumerate() {
            let c = nn::conv(g, h, p[2 * l], p[2 * l + 1], s)?;
            h = g.silu(c);
        }
        nn::conv(g, h, p[10], p[11], 1)
    }

    fn decode_boxes(&self, head: &Tensor) -> Vec<BoundingBox> {
        let gs = self.grid();
        let n = gs * gs;
        let ch = |c: usize, i: usize| head.data()[c * n + i];
        (0..n)
            .map(|i| {
                let (row, col) = (i / gs, i % gs);
                let cx = (col as f64 + sigmoid(ch(2, i))) / gs as f64;
                let cy = (row as f64 + sigmoid(ch(3, i))) / gs as f64;
                let w = ANCHOR_W * ch(4, i).clamp(-4.0, 4.0).exp();
                let h = ANCHOR_H * ch(5, i).clamp(-4.0, 4.0).exp();
                BoundingBox {
                    cx,
                    cy,
                    w,
                    h,
                    score: 0.0,
                }
            })
            .collect()
    }

    fn channel(g: &mut Graph, head: Var, c: usize) -> Result<Var> {
        let n: usize = g.shape(head)[1..].iter().product();
        let v = g.narrow(head, c, 1);
        g.reshape(v, &[n])
    }

    /// Training loss for one scene: class-balanced objectness BCE over all
    /// cells plus class BCE and box regression on the cells that own a
    /// ground-truth center.
    fn scene_loss(&self, g: &mut Graph, p: &[Var], image: &Tensor, boxes: &[BoundingBox], positive_weight: f64) -> Result<Var> {
        let gs = self.grid();
        let n = gs * gs;
        let img = g.constant(image.clone());
        let head = self.head(g, p, img)?;
        let mut obj_target = vec![0.0; n];
        let mut owners: Vec<(usize, &BoundingBox)> = Vec::new();
        for b in boxes {
            let col = ((b.cx * gs as f64) as usize).min(gs - 1);
            let row = ((b.cy * gs as f64) as usize).min(gs - 1);
            let cell = row * gs + col;
            if obj_target[cell] == 0.0 {
                obj_target[cell] = POSITIVE_TARGET;
                owners.push((cell, b));
            }
        }
        let obj = Self::channel(g, head, 0)?;
        let obj_bce = bce_with_logits(g, obj, &obj_target)?;
        let weights: Vec<f64> = obj_target
            .iter()
            .map(|&t| if t > 0.0 { positive_weight } else { 1.0 } / n as f64)
            .collect();
        let w = g.constant(Tensor::new(&[n], weights));
        let weighted = g.mul(obj_bce, w)?;
        let obj_loss = g.sum(weighted);
        if owners.is_empty() {
            return Ok(obj_loss);
        }
        let m = owners.len();
        let pick = Rc::new(SparseMap::from_rows(m, n, |k, push| push(owners[k].0, 1.0)));
        let gather = |g: &mut Graph, c: usize| -> Result<Var> {
            let ch = Self::channel(g, head, c)?;
            g.linear_map(ch, pick.clone(), &[m])
        };
        let cls = gather(g, 1)?;
        let cls_bce = bce_with_logits(g, cls, &vec![1.0; m])?;
        let mut terms = vec![g.sum(cls_bce)];
        let tx: Vec<f64> = owners.iter().map(|(_, b)| (b.cx * gs as f64).fract()).collect();
        let ty: Vec<f64> = owners.iter().map(|(_, b)| (b.cy * gs as f64).fract()).collect();
        let tw: Vec<f64> = owners.iter().map(|(_, b)| (b.w / ANCHOR_W).ln()).collect();
        let th: Vec<f64> = owners.iter().map(|(_, b)| (b.h / ANCHOR_H).ln()).collect();
        for (c, target, squash) in [(2, tx, true), (3, ty, true), (4, tw, false), (5, th, false)] {
            let raw = gather(g, c)?;
            let pred = if squash { g.sigmoid(raw) } else { raw };
            let t = g.constant(Tensor::new(&[m], target));
            let d = g.sub(pred, t)?;
            let sq = g.square(d);
            let s = g.sum(sq);
            terms.push(g.scale(s, 5.0));
        }
        let all = g.concat(&terms)?;
        let box_sum = g.sum(all);
        let box_loss = g.scale(box_sum, 1.0 / m as f64);
        g.add(obj_loss, box_loss)
    }

    fn train(&mut self, cfg: &ToyDetectorConfig) -> Result<()> {
        let spec = cfg.scene.spec(cfg.input_size);
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &self.weights.params.tensors,
        );
        let data_seed = rng::derive_named(cfg.seed, "train-scenes");
        for step in 0..cfg.steps {
            // cosine decay to 5% of the base rate
            let progress = step as f64 / cfg.steps.max(1) as f64;
            adam.cfg.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let mut g = Graph::new();
            let params = self.weights.params.bind(&mut g, true);
            let mut losses = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                let seed = rng::derive(data_seed, (step * cfg.batch_size + b) as u64);
                let scene = occluded(synth::scene(&spec, seed), cfg.occluder_prob, seed)?;
                losses.push(self.scene_loss(&mut g, &params, &scene.image, &scene.boxes, cfg.positive_weight)?);
            }
            let all = g.concat(&losses)?;
            let loss = g.mean(all);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("toy detector training diverged at step {step}")));
            }
            let grads = g.backward(loss);
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.get_or_zeros(p)).collect();
            adam.step(&mut self.weights.params.tensors, &grads);
        }
        Ok(())
    }

    /// AP@0.5 (fraction) against ground truth on `count` fresh scenes.
    pub fn holdout_ap(&self, spec: &SceneSpec, count: usize, seed: u64) -> Result<f64> {
        let scenes = synth::scenes(spec, count, seed);
        let mut images = Vec::with_capacity(count);
        for s in &scenes {
            let dets = self.detect(&s.image, 0.01)?;
            images.push(ImageDetections {
                ground_truth: s.boxes.clone(),
                detections: dets.iter().map(|d| d.bbox).collect(),
            });
        }
        Ok(average_precision(&images, 0.5, ApMethod::ElevenPoint))
    }
}

fn occluded(scene: SceneSample, prob: f64, seed: u64) -> Result<SceneSample> {
    let mut r = rng::rng(rng::derive_named(seed, "occluder"));
    if scene.boxes.is_empty() || !r.random_bool(prob) {
        return Ok(scene);
    }
    let print = synth::occluder(16, r.random());
    let placement = PlacementPolicy {
        width_frac: r.random_range(0.4..0.85),
        ..PlacementPolicy::default()
    };
    render_scene(&scene, &print, &TransformRanges::default(), r.random(), &placement)
}

fn bce_with_logits(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let sp = g.softplus(logits);
    let t = g.constant(Tensor::new(&[targets.len()], targets.to_vec()));
    let tz = g.mul(t, logits)?;
    g.sub(sp, tz)
}

/// Trains the toy detector on freshly generated synthetic scenes and checks
/// it against a held-out split. Falls short of `cfg.min_ap` is an error.
pub fn make_toy_detector(cfg: &ToyDetectorConfig) -> Result<ToyDetector> {
    if cfg.input_size % STRIDE != 0 || cfg.width < 2 {
        return Err(Error::InvalidParameter(format!(
            "toy detector input must be a multiple of {STRIDE}, width >= 2"
        )));
    }
    let mut det = ToyDetector::from_weights(ToyDetectorWeights {
        id: format!("toy-{:x}", cfg.seed),
        input_size: cfg.input_size,
        width: cfg.width,
        params: init_params(cfg.width, rng::derive_named(cfg.seed, "init")),
        holdout_ap: f64::NAN,
    });
    det.train(cfg)?;
    let spec = cfg.scene.spec(cfg.input_size);
    let ap = det.holdout_ap(&spec, cfg.holdout, rng::derive_named(cfg.seed, "holdout"))?;
    det.weights.holdout_ap = ap;
    if ap < cfg.min_ap {
        return Err(Error::Numeric(format!(
            "toy detector reached AP@0.5 {ap:.4} on the holdout split, below the fixture bar {}",
            cfg.min_ap
        )));
    }
    Ok(det)
}

impl Detector for ToyDetector {
    fn id(&self) -> &str {
        &self.weights.id
    }

    fn input_size(&self) -> usize {
        self.weights.input_size
    }

    fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn candidates(&self, g: &mut Graph, image: Var) -> Result<CandidateScores> {
        ensure_shape(&[3], &g.shape(image)[..1])?;
        let p = self.weights.params.bind(g, false);
        let head = self.head(g, &p, image)?;
        let boxes = self.decode_boxes(g.value(head));
        let obj_logits = Self::channel(g, head, 0)?;
        let cls_logits = Self::channel(g, head, 1)?;
        let objectness = g.sigmoid(obj_logits);
        let person = g.sigmoid(cls_logits);
        Ok(CandidateScores {
            objectness,
            class_probs: vec![(PERSON, person)],
            boxes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, x: f64) -> Detection {
        Detection {
            bbox: BoundingBox {
                cx: x,
                cy: 0.5,
                w: 0.2,
                h: 0.4,
                score,
            },
            objectness: score,
            class_probs: BTreeMap::from([(PERSON, 1.0)]),
        }
    }

    #[test]
    fn nms_keeps_the_best_of_overlapping_boxes() {
        let kept = nms(vec![det(0.6, 0.5), det(0.9, 0.51), det(0.7, 0.1)], 0.45);
        let scores: Vec<f64> = kept.iter().map(|d| d.bbox.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn untrained_detector_is_shape_correct() {
        let d = ToyDetector::from_weights(ToyDetectorWeights {
            id: "t".into(),
            input_size: 32,
            width: 8,
            params: init_params(8, 1),
            holdout_ap: 0.0,
        });
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(&[3, 40, 40], 0.5));
        let c = d.candidates(&mut g, img).unwrap();
        assert_eq!(g.shape(c.objectness), &[16]);
        assert_eq!(c.boxes.len(), 16);
    }
}

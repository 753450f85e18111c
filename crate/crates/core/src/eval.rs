//! Normalized mAP evaluation, reference labels, the similarity proxy and the
//! cross-model matrix.
//!
//! Clean detections above the confidence threshold become the ground truth,
//! so a detector scores exactly 100 on its own clean images and any drop
//! under a patch measures attack strength.

use crate::detector::{ClassId, Detector, PERSON};
use crate::error::{Error, Result};
use crate::render::{render_scene, BoundingBox, PlacementPolicy, SceneSample, TransformRanges};
use crate::rng;
use crate::sparse::SparseMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Ground truth and scored detections of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageDetections {
    pub ground_truth: Vec<BoundingBox>,
    /// Detections; `score` ranks them.
    pub detections: Vec<BoundingBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

impl std::str::FromStr for ApMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11point" => Ok(Self::ElevenPoint),
            "allpoint" => Ok(Self::AllPoint),
            other => Err(Error::InvalidConfig(format!(
                "unknown AP method `{other}` (expected 11point or allpoint)"
            ))),
        }
    }
}

impl std::fmt::Display for ApMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ElevenPoint => "11point",
            Self::AllPoint => "allpoint",
        })
    }
}

/// Precision/recall after each block of equal-scored detections, in
/// descending score order.
pub fn pr_curve(images: &[ImageDetections], iou: f64) -> Vec<(f64, f64)> {
    let npos: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.detections.len()).map(move |k| (i, k)))
        .collect();
    let score = |&(i, k): &(usize, usize)| images[i].detections[k].score;
    order.sort_by(|a, b| score(b).total_cmp(&score(a)));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (n, &(i, k)) in order.iter().enumerate() {
        let det = &images[i].detections[k];
        let best = images[i]
            .ground_truth
            .iter()
            .enumerate()
            .map(|(j, gt)| (j, det.iou(gt)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= iou && !taken[i][j] => {
                taken[i][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        let boundary = order.get(n + 1).is_none_or(|next| score(next) != det.score);
        if boundary {
            let recall = if npos == 0 { 0.0 } else { tp as f64 / npos as f64 };
            curve.push((tp as f64 / (tp + fp) as f64, recall));
        }
    }
    curve
}

/// Average precision as a fraction in `[0, 1]`. With no ground truth at all
/// the result is 1 when there are also no detections and 0 otherwise.
pub fn average_precision(images: &[ImageDetections], iou: f64, method: ApMethod) -> f64 {
    let npos: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if npos == 0 {
        let any = images.iter().any(|im| !im.detections.is_empty());
        return if any { 0.0 } else { 1.0 };
    }
    let curve = pr_curve(images, iou);
    let envelope = |r: f64| curve.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
    match method {
        ApMethod::ElevenPoint => (0..=10).map(|k| envelope(k as f64 / 10.0)).sum::<f64>() / 11.0,
        ApMethod::AllPoint => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for &(_, r) in &curve {
                if r > prev {
                    area += (r - prev) * envelope(r);
                    prev = r;
                }
            }
            area
        }
    }
}

/// One line of the detections sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLabels {
    pub image_id: String,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class: ClassId,
}

impl LabeledBox {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            score: self.score,
        }
    }
}

/// The JSON-lines detections sidecar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceLabels {
    pub images: Vec<ImageLabels>,
}

impl ReferenceLabels {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for im in &self.images {
            out.push_str(&serde_json::to_string(im)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let images = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { images })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset {
            entry: "reference labels".into(),
            path: path.to_path_buf(),
        })?;
        Self::from_jsonl(&text)
    }

    /// Person boxes of every image, in corpus order.
    pub fn person_boxes(&self, class: ClassId) -> Vec<Vec<BoundingBox>> {
        self.images
            .iter()
            .map(|im| im.boxes.iter().filter(|b| b.class == class).map(LabeledBox::bbox).collect())
            .collect()
    }
}

/// Scenes loaded from an index file: one image path per line, relative to
/// the index, `#` comments allowed.
pub fn load_corpus(index: &Path) -> Result<Vec<SceneSample>> {
    let file = std::fs::File::open(index).map_err(|_| Error::MissingAsset {
        entry: "corpus index".into(),
        path: index.to_path_buf(),
    })?;
    let root = index.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let entry = line.trim();
        if entry.is_empty() || entry.starts_with('#') {
            continue;
        }
        match crate::io::read_png(&root.join(entry)) {
            Ok(img) => scenes.push(SceneSample {
                image: img,
                boxes: Vec::new(),
                source_id: entry.to_string(),
            }),
            Err(e) => log::warn!("skipping unreadable corpus image {entry}: {e}"),
        }
    }
    Ok(scenes)
}

/// Writes scenes as PNGs plus an index file and a ground-truth sidecar.
/// Returns the index path.
pub fn write_corpus(dir: &Path, scenes: &[SceneSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut index = std::fs::File::create(dir.join("index.txt"))?;
    let mut truth = ReferenceLabels::default();
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        crate::io::write_png(&dir.join(&name), &s.image)?;
        writeln!(index, "{name}")?;
        truth.images.push(ImageLabels {
            image_id: name,
            boxes: s.boxes.iter().map(|b| labeled(b, PERSON)).collect(),
        });
    }
    truth.write(&dir.join("ground_truth.jsonl"))?;
    Ok(dir.join("index.txt"))
}

fn labeled(b: &BoundingBox, class: ClassId) -> LabeledBox {
    LabeledBox {
        cx: b.cx,
        cy: b.cy,
        w: b.w,
        h: b.h,
        score: b.score,
        class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Reference labels and evaluated detections both use this cut.
    pub conf_threshold: f64,
    pub ap_method: ApMethod,
    pub ranges: TransformRanges,
    pub placement: PlacementPolicy,
    pub person_class: ClassId,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            conf_threshold: 0.5,
            ap_method: ApMethod::ElevenPoint,
            ranges: TransformRanges::default(),
            placement: PlacementPolicy::default(),
            person_class: PERSON,
            seed: 0,
        }
    }
}

fn person_detections(detector: &dyn Detector, image: &Tensor, cfg: &EvalConfig) -> Result<Vec<BoundingBox>> {
    if !detector.classes().contains(&cfg.person_class) {
        return Err(Error::InvalidConfig(format!(
            "detector {} has no class {}",
            detector.id(),
            cfg.person_class
        )));
    }
    Ok(detector
        .detect(image, cfg.conf_threshold)?
        .into_iter()
        .filter_map(|d| {
            let s = d.confidence(cfg.person_class);
            (s >= cfg.conf_threshold).then_some(BoundingBox { score: s, ..d.bbox })
        })
        .collect())
}

/// Clean-image person detections of `detector` on every scene.
pub fn generate_reference_labels(
    detector: &dyn Detector,
    corpus: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<ReferenceLabels> {
    let mut images = Vec::with_capacity(corpus.len());
    for scene in corpus {
        let boxes = person_detections(detector, &scene.image, cfg)?;
        images.push(ImageLabels {
            image_id: scene.source_id.clone(),
            boxes: boxes.iter().map(|b| labeled(b, cfg.person_class)).collect(),
        });
    }
    Ok(ReferenceLabels { images })
}

/// Copies of `scenes` whose person boxes are the detector's clean
/// predictions, for training on the people the victim actually sees.
pub fn label_with_detector(
    detector: &dyn Detector,
    scenes: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<Vec<SceneSample>> {
    let labels = generate_reference_labels(detector, scenes, cfg)?;
    Ok(scenes
        .iter()
        .zip(labels.person_boxes(cfg.person_class))
        .map(|(s, boxes)| SceneSample {
            boxes,
            ..s.clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector_id: String,
    pub dataset_id: String,
    pub map_percent: f64,
    pub n_images: usize,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "detector_id,dataset_id,mAP,n_images,iou_threshold,conf_threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.detector_id, self.dataset_id, self.map_percent, self.n_images, self.iou_threshold, self.conf_threshold
        )
    }
}

/// mAP (percent) of `detector` against its own clean reference labels, with
/// `patch` rendered onto every reference person box (or no patch at all).
pub fn evaluate_map(
    detector: &dyn Detector,
    dataset_id: &str,
    corpus: &[SceneSample],
    reference: &ReferenceLabels,
    patch: Option<&Tensor>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if reference.images.len() != corpus.len()
        || reference.images.iter().zip(corpus).any(|(r, s)| r.image_id != s.source_id)
    {
        return Err(Error::ReferenceMismatch(format!(
            "reference labels list {} images that do not match the {}-image corpus",
            reference.images.len(),
            corpus.len()
        )));
    }
    let refs = reference.person_boxes(cfg.person_class);
    let mut images = Vec::with_capacity(corpus.len());
    for (i, (scene, gt)) in corpus.iter().zip(refs).enumerate() {
        let image = match patch {
            None => scene.image.clone(),
            Some(p) => {
                let target = SceneSample {
                    image: scene.image.clone(),
                    boxes: gt.clone(),
                    source_id: scene.source_id.clone(),
                };
                let seed = rng::derive(rng::derive_named(cfg.seed, "eval-transform"), i as u64);
                render_scene(&target, p, &cfg.ranges, seed, &cfg.placement)?.image
            }
        };
        images.push(ImageDetections {
            detections: person_detections(detector, &image, cfg)?,
            ground_truth: gt,
        });
    }
    let ap = average_precision(&images, cfg.iou_threshold, cfg.ap_method);
    Ok(EvalReport {
        detector_id: detector.id().to_string(),
        dataset_id: dataset_id.to_string(),
        map_percent: 100.0 * ap,
        n_images: corpus.len(),
        iou_threshold: cfg.iou_threshold,
        conf_threshold: cfg.conf_threshold,
    })
}

/// Maps images to feature vectors for the similarity metric.
pub trait Embedder {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// A fixed linear embedder: bilinear resize to 32x32, removal of each
/// channel's mean, a bank of random zero-mean 3x3 filters plus the centered
/// channels, 4x4 average pooling and a random projection. Blind to global
/// color offsets, so it compares layout and texture. A stand-in for a pretrained image encoder; only rank
/// orders of its similarities are meaningful.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    filters: Vec<[f64; 27]>,
    projection: Vec<Vec<f64>>,
}

const EMBED_SIDE: usize = 32;
const EMBED_POOL: usize = 4;

impl RandomProjectionEmbedder {
    pub fn new(n_filters: usize, dim: usize, seed: u64) -> Self {
        let filters = (0..n_filters)
            .map(|f| {
                let t = rng::gaussian(&[27], rng::derive(rng::derive_named(seed, "filters"), f as u64));
                let mean = t.mean();
                let mut k = [0.0; 27];
                for (dst, v) in k.iter_mut().zip(t.data()) {
                    *dst = v - mean;
                }
                k
            })
            .collect::<Vec<_>>();
        let cells = (EMBED_SIDE / EMBED_POOL).pow(2);
        let features = (n_filters + 3) * cells;
        let scale = 1.0 / (features as f64).sqrt();
        let projection = (0..dim)
            .map(|d| {
                rng::gaussian(&[features], rng::derive(rng::derive_named(seed, "projection"), d as u64))
                    .data()
                    .iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect();
        Self { filters, projection }
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(16, 64, 0x5eed)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                got: image.shape().to_vec(),
            });
        }
        let n = EMBED_SIDE;
        let mut x = SparseMap::resize(3, h, w, n, n).apply(image.data());
        for plane in x.chunks_mut(n * n) {
            let mean = plane.iter().sum::<f64>() / (n * n) as f64;
            plane.iter_mut().for_each(|v| *v -= mean);
        }
        let at = |ch: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= n as isize || xx >= n as isize {
                0.0
            } else {
                x[(ch * n + y as usize) * n + xx as usize]
            }
        };
        let cells = n / EMBED_POOL;
        let mut features = Vec::with_capacity((self.filters.len() + 3) * cells * cells);
        let mut pool = |response: &dyn Fn(usize, usize) -> f64| {
            for cy in 0..cells {
                for cx in 0..cells {
                    let mut s = 0.0;
                    for y in cy * EMBED_POOL..(cy + 1) * EMBED_POOL {
                        for xx in cx * EMBED_POOL..(cx + 1) * EMBED_POOL {
                            s += response(y, xx);
                        }
                    }
                    features.push(s / (EMBED_POOL * EMBED_POOL) as f64);
                }
            }
        };
        for ch in 0..3 {
            pool(&|y, xx| x[(ch * n + y) * n + xx]);
        }
        for k in &self.filters {
            pool(&|y, xx| {
                let mut s = 0.0;
                for ch in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += k[ch * 9 + dy * 3 + dx] * at(ch, y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                        }
                    }
                }
                s
            });
        }
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(&features).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`. Two zero vectors
/// count as identical; a zero vector against anything else scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Ok(if na == nb { 1.0 } else { 0.0 });
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn embedding_similarity(a: &Tensor, b: &Tensor, embedder: &dyn Embedder) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    cosine(&embedder.embed(a)?, &embedder.embed(b)?)
}

/// A detector together with its clean reference labels on the corpus.
pub struct ReferencedDetector<'a> {
    pub detector: &'a dyn Detector,
    pub reference: ReferenceLabels,
}

/// Patches (rows) against detectors (columns).
#[derive(Clone, Debug)]
pub struct EvalMatrix {
    pub patches: Vec<String>,
    pub detectors: Vec<String>,
    pub cells: Vec<Vec<std::result::Result<EvalReport, String>>>,
}

impl EvalMatrix {
    /// Mean over the successful cells of each row.
    pub fn row_averages(&self) -> Vec<Option<f64>> {
        self.cells.iter().map(|row| mean_ok(row.iter())).collect()
    }

    /// Mean over the successful cells of each column.
    pub fn column_averages(&self) -> Vec<Option<f64>> {
        (0..self.detectors.len())
            .map(|j| mean_ok(self.cells.iter().map(|row| &row[j])))
            .collect()
    }

    /// Detectors as columns, patches as rows, trailing `Avg.` column. Failed
    /// cells are written as `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch");
        for d in &self.detectors {
            out.push(',');
            out.push_str(d);
        }
        out.push_str(",Avg.\n");
        for ((name, row), avg) in self.patches.iter().zip(&self.cells).zip(self.row_averages()) {
            out.push_str(name);
            for cell in row {
                out.push(',');
                match cell {
                    Ok(r) => out.push_str(&format!("{:.4}", r.map_percent)),
                    Err(_) => out.push_str("NaN"),
                }
            }
            out.push_str(&format!(",{}\n", avg.map_or("NaN".to_string(), |a| format!("{a:.4}"))));
        }
        out
    }
}

fn mean_ok<'a>(cells: impl Iterator<Item = &'a std::result::Result<EvalReport, String>>) -> Option<f64> {
    let vals: Vec<f64> = cells.filter_map(|c| c.as_ref().ok().map(|r| r.map_percent)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Evaluates every patch against every detector; a failing cell is recorded
/// and the rest of the matrix still runs.
pub fn cross_model_matrix(
    patches: &[(String, Option<Tensor>)],
    detectors: &[ReferencedDetector<'_>],
    dataset_id: &str,
    corpus: &[SceneSample],
    cfg: &EvalConfig,
) -> EvalMatrix {
    let cells = patches
        .iter()
        .map(|(_, p)| {
            detectors
                .iter()
                .map(|d| {
                    evaluate_map(d.detector, dataset_id, corpus, &d.reference, p.as_ref(), cfg).map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect();
    EvalMatrix {
        patches: patches.iter().map(|(n, _)| n.clone()).collect(),
        detectors: detectors.iter().map(|d| d.detector.id().to_string()).collect(),
        cells,
    }
}

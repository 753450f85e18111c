//! Binding generators, detectors and corpora from a run config.

use patchsmith::config::RunConfig;
use patchsmith::detector::{make_toy_detector, ToyDetector, ToyDetectorConfig};
use patchsmith::diffusion::NoiseSchedule;
use patchsmith::eval::{generate_reference_labels, load_corpus, EvalConfig, ReferenceLabels};
use patchsmith::generator::{
    adapt_pretrained_generator, make_toy_predictor, AdapterManifest, BoundGenerator, GenerationCodec, ScaledCodec,
    ToyPredictor, DEFAULT_LATENT_SCALE,
};
use patchsmith::render::SceneSample;
use patchsmith::{rng, synth, Error, Result};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const TOY_PATCH_SIZE: usize = 16;

pub fn cache_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("PATCHSMITH_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir().join("cache"))
}

fn require(entry: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingAsset {
            entry: entry.into(),
            path: path.to_path_buf(),
        })
    }
}

/// Loads `path` if present, else builds, saves atomically and returns.
fn cached<T>(
    path: &Path,
    load: impl Fn(&Path) -> Result<T>,
    build: impl FnOnce() -> Result<T>,
    save: impl Fn(&T, &Path) -> Result<()>,
) -> Result<T> {
    if path.exists() {
        log::info!("loading {}", path.display());
        return load(path);
    }
    let value = build()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    save(&value, &tmp)?;
    std::fs::rename(&tmp, path)?;
    log::info!("cached {}", path.display());
    Ok(value)
}

pub fn generator(cfg: &RunConfig) -> Result<BoundGenerator> {
    let cache = cache_dir(cfg);
    if let Some(path) = cfg.generator_manifest() {
        let manifest = AdapterManifest::from_file(&path)?;
        return adapt_pretrained_generator(&manifest, Some(&cache));
    }
    let train = cfg.toy_train()?;
    let per = cfg.textures_per_label()?;
    let shape = [3, TOY_PATCH_SIZE, TOY_PATCH_SIZE];
    let codec = ScaledCodec::new(&shape, DEFAULT_LATENT_SCALE)?;
    let sched = Arc::new(NoiseSchedule::default());
    let name = format!(
        "toy_generator_n{per}_s{}_w{}_seed{}.json",
        train.steps, train.width, train.seed
    );
    let predictor = cached(&cache.join(name), ToyPredictor::load, || {
        log::info!("training toy generator ({} steps)", train.steps);
        let textures = synth::texture_set(per, TOY_PATCH_SIZE, rng::derive_named(train.seed, "textures"));
        let encoded = textures
            .into_iter()
            .map(|(t, l)| Ok((codec.encode(&t)?, l)))
            .collect::<Result<Vec<_>>>()?;
        make_toy_predictor(&encoded, &synth::TEXTURE_LABELS, sched.clone(), &train)
    }, ToyPredictor::save)?;
    Ok(BoundGenerator {
        schedule: predictor.schedule().clone(),
        predictor: Box::new(predictor),
        codec: Box::new(codec),
    })
}

fn toy_detector(cache: &Path, dc: &ToyDetectorConfig) -> Result<ToyDetector> {
    let name = format!("toy_detector_s{}_w{}_seed{}.json", dc.steps, dc.width, dc.seed);
    let det = cached(&cache.join(name), ToyDetector::load, || {
        log::info!("training toy detector seed {} ({} steps)", dc.seed, dc.steps);
        make_toy_detector(dc)
    }, ToyDetector::save)?;
    let ap = det.weights().holdout_ap;
    if ap.is_nan() || ap < dc.min_ap {
        return Err(Error::Numeric(format!(
            "cached detector {} has holdout AP {ap}, below detector.min_ap {}",
            det.weights().id,
            dc.min_ap
        )));
    }
    Ok(det)
}

pub fn detectors(cfg: &RunConfig) -> Result<Vec<ToyDetector>> {
    let files = cfg.detector_weights();
    if !files.is_empty() {
        return files
            .iter()
            .map(|p| {
                require("detector.weights", p)?;
                ToyDetector::load(p)
            })
            .collect();
    }
    let cache = cache_dir(cfg);
    cfg.toy_detectors()?.iter().map(|dc| toy_detector(&cache, dc)).collect()
}

/// The corpus at `index`, or `count` synthetic scenes.
fn corpus(index: Option<PathBuf>, count: usize, seed: u64, entry: &str) -> Result<(String, Vec<SceneSample>)> {
    match index {
        Some(path) => {
            require(entry, &path)?;
            let id = path
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((id, load_corpus(&path)?))
        }
        None => Ok(("synthetic".into(), synth::scenes(&synth::SceneSpec::default(), count, seed))),
    }
}

pub fn train_corpus(cfg: &RunConfig) -> Result<(String, Vec<SceneSample>)> {
    let seed = rng::derive_named(cfg.seed()?, "train-corpus");
    corpus(cfg.train_corpus(), cfg.train_count()?, seed, "corpus.train")
}

pub fn test_corpus(cfg: &RunConfig) -> Result<(String, Vec<SceneSample>)> {
    let seed = rng::derive_named(cfg.seed()?, "test-corpus");
    corpus(cfg.test_corpus(), cfg.test_count()?, seed, "corpus.test")
}

/// Reference labels per detector: read from `eval.reference` when given,
/// otherwise generated and written to `out`.
pub fn references(
    cfg: &RunConfig,
    detectors: &[ToyDetector],
    corpus: &[SceneSample],
    eval: &EvalConfig,
    out: &Path,
) -> Result<Vec<ReferenceLabels>> {
    let given = cfg.eval_references();
    if !given.is_empty() {
        if given.len() != detectors.len() {
            return Err(Error::InvalidConfig(format!(
                "eval.reference lists {} files for {} detectors",
                given.len(),
                detectors.len()
            )));
        }
        return given.iter().map(|p| ReferenceLabels::read(p)).collect();
    }
    detectors
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let labels = generate_reference_labels(d, corpus, eval)?;
            labels.write(&out.join(format!("reference_{k}.jsonl")))?;
            Ok(labels)
        })
        .collect()
}

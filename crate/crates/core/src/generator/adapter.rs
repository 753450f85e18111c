//! Binding generators from an adapter manifest.
//!
//! Manifest keys: `generator.kind`, `generator.checkpoint`, `codec.kind`,
//! `codec.checkpoint`, `conditioning.kind`. Anything else is rejected.
//!
//! Built-in generator kinds are `toy` (a saved [`ToyPredictor`]) and
//! `pointmass` (a PNG target). Any other kind names an external runtime;
//! its checkpoint must exist, but no runtime bridge ships with this crate.
//!
//! Built-in codecs are `identity`, `scaled` (recentered pixels divided by
//! [`DEFAULT_LATENT_SCALE`]) and `pool2` (2x average pooling).

use super::{make_pointmass_oracle, GenerationCodec, IdentityCodec, NoisePredictor, PoolCodec, ScaledCodec, ToyPredictor, DEFAULT_LATENT_SCALE};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::kv;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const KEYS: [&str; 5] = [
    "generator.kind",
    "generator.checkpoint",
    "codec.kind",
    "codec.checkpoint",
    "conditioning.kind",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterManifest {
    pub generator_kind: String,
    pub generator_checkpoint: Option<PathBuf>,
    pub codec_kind: String,
    pub codec_checkpoint: Option<PathBuf>,
    pub conditioning_kind: String,
}

impl AdapterManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = kv::parse(text)?;
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidConfig(format!("unknown manifest key `{k}`")));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        Ok(Self {
            generator_kind: get("generator.kind")
                .ok_or_else(|| Error::InvalidConfig("manifest lacks generator.kind".into()))?,
            generator_checkpoint: get("generator.checkpoint").map(PathBuf::from),
            codec_kind: get("codec.kind").unwrap_or_else(|| "identity".into()),
            codec_checkpoint: get("codec.checkpoint").map(PathBuf::from),
            conditioning_kind: get("conditioning.kind").unwrap_or_else(|| "label".into()),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset {
            entry: "manifest".into(),
            path: path.to_path_buf(),
        })?;
        Self::parse(&text)
    }
}

/// A generator bound behind the predictor and codec contracts.
pub struct BoundGenerator {
    pub predictor: Box<dyn NoisePredictor>,
    pub codec: Box<dyn GenerationCodec>,
    pub schedule: Arc<NoiseSchedule>,
}

/// Resolves `path`, falling back to `cache_dir` for relative paths that do
/// not exist as given.
fn locate(entry: &str, path: Option<&PathBuf>, cache_dir: Option<&Path>) -> Result<PathBuf> {
    let Some(path) = path else {
        return Err(Error::InvalidConfig(format!("manifest lacks {entry}")));
    };
    if path.exists() {
        return Ok(path.clone());
    }
    if path.is_relative() {
        if let Some(cached) = cache_dir.map(|d| d.join(path)).filter(|p| p.exists()) {
            return Ok(cached);
        }
    }
    Err(Error::MissingAsset {
        entry: entry.into(),
        path: path.clone(),
    })
}

pub fn adapt_pretrained_generator(manifest: &AdapterManifest, cache_dir: Option<&Path>) -> Result<BoundGenerator> {
    let (predictor, schedule): (Box<dyn NoisePredictor>, Arc<NoiseSchedule>) = match manifest.generator_kind.as_str() {
        "toy" => {
            let path = locate("generator.checkpoint", manifest.generator_checkpoint.as_ref(), cache_dir)?;
            let toy = ToyPredictor::load(&path)?;
            let sched = toy.schedule().clone();
            (Box::new(toy), sched)
        }
        "pointmass" => {
            let path = locate("generator.checkpoint", manifest.generator_checkpoint.as_ref(), cache_dir)?;
            let target = crate::io::read_png(&path)?;
            let sched = Arc::new(NoiseSchedule::default());
            (Box::new(make_pointmass_oracle(target, sched.clone())?), sched)
        }
        other => {
            locate("generator.checkpoint", manifest.generator_checkpoint.as_ref(), cache_dir)?;
            return Err(Error::UnsupportedCapability(format!(
                "no runtime bridge for external generator kind `{other}`"
            )));
        }
    };
    match manifest.conditioning_kind.as_str() {
        "none" | "label" => {}
        "text" => {
            return Err(Error::UnsupportedCapability(format!(
                "generator kind `{}` has no text encoder",
                manifest.generator_kind
            )))
        }
        other => return Err(Error::InvalidConfig(format!("unknown conditioning.kind `{other}`"))),
    }
    let latent = predictor.latent_shape().to_vec();
    let codec: Box<dyn GenerationCodec> = match manifest.codec_kind.as_str() {
        "identity" => Box::new(IdentityCodec::new(&latent)),
        "scaled" => Box::new(ScaledCodec::new(&latent, DEFAULT_LATENT_SCALE)?),
        "pool2" => Box::new(PoolCodec::new(&[latent[0], latent[1] * 2, latent[2] * 2])?),
        other => {
            locate("codec.checkpoint", manifest.codec_checkpoint.as_ref(), cache_dir)?;
            return Err(Error::UnsupportedCapability(format!(
                "no runtime bridge for external codec kind `{other}`"
            )));
        }
    };
    Ok(BoundGenerator {
        predictor,
        codec,
        schedule,
    })
}

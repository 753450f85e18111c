//! Run configuration: one flat, namespaced `key = value` document.
//!
//! Every key has a default and a one-line description in [`KEYS`]. Lists
//! are comma separated; integer ranges may be written `a..b` (inclusive).
//! Ranges of transform parameters are `lo,hi` pairs.

use crate::detector::ToyDetectorConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::eval::{ApMethod, EvalConfig};
use crate::generator::ToyTrainConfig;
use crate::kv;
use crate::optimizer::OptimizeConfig;
use crate::render::{PlacementPolicy, TransformRanges};
use crate::sweep::SweepSpec;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; every random stream derives from it"),
    ("output.dir", "out", "directory for all artifacts"),
    ("generator.manifest", "", "adapter manifest; empty trains the built-in toy generator"),
    ("generator.prompt", "stripes", "condition prompt (toy labels: stripes, checker)"),
    ("generator.train_steps", "1000", "toy generator training steps"),
    ("generator.width", "16", "toy generator feature channels"),
    ("generator.textures_per_label", "64", "toy generator training images per label"),
    ("detector.weights", "", "toy detector weight files; empty trains one per detector.toy_seeds entry"),
    ("detector.toy_seeds", "0", "seeds of the built-in toy detectors"),
    ("detector.train_steps", "600", "toy detector training steps"),
    ("detector.width", "24", "toy detector feature channels"),
    ("detector.min_ap", "0.95", "minimum held-out AP a trained toy detector must reach"),
    ("corpus.train", "", "training corpus index; empty uses synthetic scenes"),
    ("corpus.train_count", "200", "synthetic training scenes"),
    ("corpus.test", "", "test corpus index; empty uses synthetic scenes"),
    ("corpus.test_count", "100", "synthetic test scenes"),
    ("sampler.t_start", "500", "APS noise level"),
    ("sampler.s", "166", "APS step size"),
    ("sampler.cfg_w", "1", "classifier-free guidance weight"),
    ("optimize.max_iterations", "1000", "optimizer iterations"),
    ("optimize.batch_size", "8", "scenes per iteration"),
    ("optimize.lr", "0.005", "initial Adam learning rate"),
    ("optimize.lr_decay_factor", "0.5", "learning-rate multiplier on a plateau"),
    ("optimize.lr_patience", "10", "flat epochs before decaying"),
    ("optimize.loss_delta_threshold", "0.0001", "epoch loss change that counts as flat"),
    ("optimize.lambda", "0.1", "TV loss weight"),
    ("optimize.validation_fraction", "0.1", "share of training scenes held out for checkpoint selection"),
    ("optimize.validate_every", "0", "iterations between checkpoints; 0 means once per epoch"),
    ("transform.brightness", "-0.1,0.1", "additive brightness range"),
    ("transform.contrast", "0.8,1.2", "contrast gain range"),
    ("transform.noise", "0,0.05", "pixel noise amplitude range"),
    ("transform.rotation_deg", "-20,20", "rotation range in degrees"),
    ("transform.scale", "0.9,1.1", "scale jitter range"),
    ("placement.width_frac", "0.65", "patch width as a fraction of the person box"),
    ("placement.height_frac", "", "patch height fraction; empty keeps the aspect ratio"),
    ("placement.vertical_center", "0.45", "patch center height within the box"),
    ("eval.iou_threshold", "0.5", "IoU for a true positive"),
    ("eval.conf_threshold", "0.5", "confidence cut for reference labels and detections"),
    ("eval.ap_method", "11point", "11point or allpoint"),
    ("eval.reference", "", "reference sidecars, one per detector; empty generates them"),
    ("eval.patches", "", "patch images to evaluate; empty evaluates the clean corpus"),
    ("sweep.t_start", "200,400,600,800", "t_start values"),
    ("sweep.s", "166", "step-size values"),
    ("sweep.cfg_w", "1", "guidance weights"),
    ("sweep.max_iterations", "100", "optimizer iterations per sweep cell"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidConfig(format!("`{key} = {value}`: expected {what}"))
}

impl RunConfig {
    /// Defaults overridden by the keys in `text`.
    pub fn from_document(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text).map_err(|e| Error::InvalidConfig(e.to_string()))? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _, _)) = KEYS.iter().find(|(k, _, _)| *k == key) else {
            return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
        };
        if value.contains('#') || value.contains('\n') {
            return Err(bad(key, value, "a value without `#` or newlines"));
        }
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    /// The resolved configuration as a document that parses back to `self`.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for &(k, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{k} = {}\n", self.values[k]));
        }
        out
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| bad(key, v, what))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn paths(&self, key: &str) -> Vec<PathBuf> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect()
    }

    fn list<T: FromStr + From<u32>>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        let mut out = Vec::new();
        for item in v.split(',').map(str::trim) {
            if let Some((a, b)) = item.split_once("..") {
                let (a, b): (u32, u32) = match (a.trim().parse(), b.trim().parse()) {
                    (Ok(a), Ok(b)) if a <= b => (a, b),
                    _ => return Err(bad(key, v, "an inclusive integer range a..b")),
                };
                out.extend((a..=b).map(T::from));
            } else {
                out.push(item.parse().map_err(|_| bad(key, v, "a comma separated list of numbers"))?);
            }
        }
        Ok(out)
    }

    fn pair(&self, key: &str) -> Result<(f64, f64)> {
        let v = self.get(key);
        match self.list::<f64>(key)?.as_slice() {
            &[lo, hi] => Ok((lo, hi)),
            _ => Err(bad(key, v, "a `lo,hi` pair")),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed", "an unsigned integer")
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.get("output.dir"))
    }

    pub fn generator_manifest(&self) -> Option<PathBuf> {
        self.path("generator.manifest")
    }

    pub fn prompt(&self) -> &str {
        self.get("generator.prompt")
    }

    pub fn textures_per_label(&self) -> Result<usize> {
        self.parse("generator.textures_per_label", "an unsigned integer")
    }

    pub fn toy_train(&self) -> Result<ToyTrainConfig> {
        Ok(ToyTrainConfig {
            steps: self.parse("generator.train_steps", "an unsigned integer")?,
            width: self.parse("generator.width", "an unsigned integer")?,
            seed: self.seed()?,
            ..ToyTrainConfig::default()
        })
    }

    pub fn detector_weights(&self) -> Vec<PathBuf> {
        self.paths("detector.weights")
    }

    /// One training config per `detector.toy_seeds` entry.
    pub fn toy_detectors(&self) -> Result<Vec<ToyDetectorConfig>> {
        let steps = self.parse("detector.train_steps", "an unsigned integer")?;
        let width = self.parse("detector.width", "an unsigned integer")?;
        let min_ap = self.parse("detector.min_ap", "a number")?;
        Ok(self
            .list::<u32>("detector.toy_seeds")?
            .into_iter()
            .map(|seed| ToyDetectorConfig {
                steps,
                width,
                min_ap,
                seed: seed as u64,
                ..ToyDetectorConfig::default()
            })
            .collect())
    }

    pub fn train_corpus(&self) -> Option<PathBuf> {
        self.path("corpus.train")
    }

    pub fn train_count(&self) -> Result<usize> {
        self.parse("corpus.train_count", "an unsigned integer")
    }

    pub fn test_corpus(&self) -> Option<PathBuf> {
        self.path("corpus.test")
    }

    pub fn test_count(&self) -> Result<usize> {
        self.parse("corpus.test_count", "an unsigned integer")
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            t_start: self.parse("sampler.t_start", "an unsigned integer")?,
            step: self.parse("sampler.s", "an unsigned integer")?,
            cfg_weight: self.parse("sampler.cfg_w", "a number")?,
            sigma: 0.0,
            seed: crate::rng::derive_named(self.seed()?, "sampler"),
        })
    }

    pub fn optimize(&self) -> Result<OptimizeConfig> {
        let u = "an unsigned integer";
        let f = "a number";
        Ok(OptimizeConfig {
            max_iterations: self.parse("optimize.max_iterations", u)?,
            batch_size: self.parse("optimize.batch_size", u)?,
            lr: self.parse("optimize.lr", f)?,
            lr_decay_factor: self.parse("optimize.lr_decay_factor", f)?,
            lr_patience: self.parse("optimize.lr_patience", u)?,
            loss_delta_threshold: self.parse("optimize.loss_delta_threshold", f)?,
            lambda: self.parse("optimize.lambda", f)?,
            validation_fraction: self.parse("optimize.validation_fraction", f)?,
            validate_every: self.parse("optimize.validate_every", u)?,
            sampler: self.sampler()?,
            seed: crate::rng::derive_named(self.seed()?, "optimize"),
        })
    }

    pub fn ranges(&self) -> Result<TransformRanges> {
        let r = TransformRanges {
            brightness: self.pair("transform.brightness")?,
            contrast: self.pair("transform.contrast")?,
            noise: self.pair("transform.noise")?,
            rotation_deg: self.pair("transform.rotation_deg")?,
            scale: self.pair("transform.scale")?,
        };
        r.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(r)
    }

    pub fn placement(&self) -> Result<PlacementPolicy> {
        let height_frac = match self.get("placement.height_frac") {
            "" => None,
            _ => Some(self.parse("placement.height_frac", "a number or nothing")?),
        };
        Ok(PlacementPolicy {
            width_frac: self.parse("placement.width_frac", "a number")?,
            height_frac,
            vertical_center: self.parse("placement.vertical_center", "a number")?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            iou_threshold: self.parse("eval.iou_threshold", "a number")?,
            conf_threshold: self.parse("eval.conf_threshold", "a number")?,
            ap_method: self.parse::<ApMethod>("eval.ap_method", "11point or allpoint")?,
            ranges: self.ranges()?,
            placement: self.placement()?,
            seed: crate::rng::derive_named(self.seed()?, "eval"),
            ..EvalConfig::default()
        })
    }

    pub fn eval_references(&self) -> Vec<PathBuf> {
        self.paths("eval.reference")
    }

    pub fn eval_patches(&self) -> Vec<PathBuf> {
        self.paths("eval.patches")
    }

    pub fn sweep(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            t_starts: self.list::<u32>("sweep.t_start")?.into_iter().map(|t| t as usize).collect(),
            steps: self.list::<u32>("sweep.s")?.into_iter().map(|s| s as usize).collect(),
            cfg_weights: self.list("sweep.cfg_w")?,
        })
    }

    pub fn sweep_iterations(&self) -> Result<usize> {
        self.parse("sweep.max_iterations", "an unsigned integer")
    }

    /// Parses every typed view so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.toy_train()?;
        self.toy_detectors()?;
        self.textures_per_label()?;
        self.train_count()?;
        self.test_count()?;
        self.optimize()?;
        self.eval()?;
        self.sweep()?;
        self.sweep_iterations()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_the_typed_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let o = cfg.optimize().unwrap();
        let d = OptimizeConfig::default();
        assert_eq!((o.max_iterations, o.batch_size, o.lr, o.lambda), (d.max_iterations, d.batch_size, d.lr, d.lambda));
        assert_eq!(cfg.ranges().unwrap(), TransformRanges::default());
        assert_eq!(cfg.placement().unwrap(), PlacementPolicy::default());
        let s = cfg.sampler().unwrap();
        assert_eq!((s.t_start, s.step, s.cfg_weight), (500, 166, 1.0));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("sweep.cfg_w=1..20").unwrap();
        cfg.set("placement.height_frac", "0.3").unwrap();
        let back = RunConfig::from_document(&cfg.to_document()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sweep().unwrap().cfg_weights, (1..=20).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_document("optimise.lr = 1"), Err(Error::InvalidConfig(_))));
        let cfg = RunConfig::from_document("optimize.lr = fast").unwrap();
        assert!(matches!(cfg.optimize(), Err(Error::InvalidConfig(_))));
        let cfg = RunConfig::from_document("transform.scale = 1").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().set_pair("seed").is_err());
    }
}

//! Contracts for noise predictors, conditioning and the
//! generation-space/pixel-space codec, plus the analytic point-mass oracle.

mod adapter;
mod toy;

pub use adapter::{adapt_pretrained_generator, AdapterManifest, BoundGenerator};
pub use toy::{make_toy_predictor, ToyPredictor, ToyPredictorWeights, ToyTrainConfig};

use crate::autograd::{Graph, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure_shape, Error, Result};
use crate::sparse::SparseMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use std::sync::Arc;

/// Conditioning payload as understood by a bound generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Embedding {
    #[default]
    Unconditional,
    /// Discrete class label (desk-scale conditioning).
    Label(usize),
    /// Opaque vector produced by an external text encoder.
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionRef {
    pub prompt: String,
    pub negative_prompt: String,
    pub embedding: Embedding,
}

impl ConditionRef {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn label(prompt: impl Into<String>, label: usize) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: String::new(),
            embedding: Embedding::Label(label),
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.embedding == Embedding::Unconditional
    }
}

/// A noise predictor `eps(x_t, t, c)`.
///
/// Implementations build their computation into the caller's [`Graph`] so
/// samplers can differentiate through them. Output shape must equal
/// [`latent_shape`](Self::latent_shape) and be a deterministic function of
/// the inputs.
pub trait NoisePredictor {
    fn latent_shape(&self) -> &[usize];

    fn supports_unconditional(&self) -> bool;

    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, condition: &ConditionRef) -> Result<Var>;

    /// Resolves a prompt into a condition. The empty prompt is always the
    /// unconditional embedding.
    fn condition(&self, prompt: &str) -> Result<ConditionRef> {
        if prompt.is_empty() {
            Ok(ConditionRef::unconditional())
        } else {
            Err(Error::UnsupportedCapability(format!(
                "this predictor has no text conditioning (prompt {prompt:?})"
            )))
        }
    }

    fn predict_tensor(&self, x_t: &Tensor, t: usize, condition: &ConditionRef) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let out = self.predict(&mut g, x, t, condition)?;
        Ok(g.value(out).clone())
    }
}

/// Maps between generation space and `[C, H, W]` pixels in `[0, 1]`.
pub trait GenerationCodec {
    fn latent_shape(&self) -> &[usize];

    fn pixel_shape(&self) -> &[usize];

    fn encode(&self, pixels: &Tensor) -> Result<Tensor>;

    /// Differentiable decode; the output is clamped to `[0, 1]`.
    fn decode_graph(&self, g: &mut Graph, latent: Var) -> Result<Var>;

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(latent.clone());
        let out = self.decode_graph(&mut g, v)?;
        Ok(g.value(out).clone())
    }
}

/// Generation space is pixel space.
#[derive(Clone, Debug)]
pub struct IdentityCodec {
    shape: Vec<usize>,
}

impl IdentityCodec {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
        }
    }
}

impl GenerationCodec for IdentityCodec {
    fn latent_shape(&self) -> &[usize] {
        &self.shape
    }

    fn pixel_shape(&self) -> &[usize] {
        &self.shape
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        ensure_shape(&self.shape, pixels.shape())?;
        Ok(pixels.clone())
    }

    fn decode_graph(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        ensure_shape(&self.shape, g.shape(latent))?;
        Ok(g.clamp(latent, 0.0, 1.0))
    }
}

/// Pixels recentered and divided by `scale`, so that generation space has
/// roughly unit variance the way latent diffusion models scale their
/// autoencoder latents.
#[derive(Clone, Debug)]
pub struct ScaledCodec {
    shape: Vec<usize>,
    scale: f64,
}

/// Pixel spread of the procedural textures.
pub const DEFAULT_LATENT_SCALE: f64 = 0.2;

impl ScaledCodec {
    pub fn new(shape: &[usize], scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("codec scale must be positive, got {scale}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            scale,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl GenerationCodec for ScaledCodec {
    fn latent_shape(&self) -> &[usize] {
        &self.shape
    }

    fn pixel_shape(&self) -> &[usize] {
        &self.shape
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        ensure_shape(&self.shape, pixels.shape())?;
        Ok(pixels.map(|p| (p - 0.5) / self.scale))
    }

    fn decode_graph(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        ensure_shape(&self.shape, g.shape(latent))?;
        let p = g.affine(latent, self.scale, 0.5);
        Ok(g.clamp(p, 0.0, 1.0))
    }
}

/// A fixed 2x-downsampling codec: encode averages 2x2 blocks, decode
/// upsamples bilinearly. Lossy; stands in for a learned autoencoder.
#[derive(Clone, Debug)]
pub struct PoolCodec {
    latent: Vec<usize>,
    pixel: Vec<usize>,
    up: Rc<SparseMap>,
}

impl PoolCodec {
    pub fn new(pixel_shape: &[usize]) -> Result<Self> {
        let &[c, h, w] = pixel_shape else {
            return Err(Error::InvalidParameter("pool codec needs a [C, H, W] pixel shape".into()));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "pool codec needs even spatial size, got {h}x{w}"
            )));
        }
        Ok(Self {
            latent: vec![c, h / 2, w / 2],
            pixel: pixel_shape.to_vec(),
            up: Rc::new(SparseMap::resize(c, h / 2, w / 2, h, w)),
        })
    }
}

impl GenerationCodec for PoolCodec {
    fn latent_shape(&self) -> &[usize] {
        &self.latent
    }

    fn pixel_shape(&self) -> &[usize] {
        &self.pixel
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        ensure_shape(&self.pixel, pixels.shape())?;
        let mut g = Graph::new();
        let p = g.constant(pixels.clone());
        let out = g.avg_pool2(p)?;
        Ok(g.value(out).clone())
    }

    fn decode_graph(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        ensure_shape(&self.latent, g.shape(latent))?;
        let up = g.linear_map(latent, self.up.clone(), &self.pixel)?;
        Ok(g.clamp(up, 0.0, 1.0))
    }
}

/// The exact noise predictor for a data distribution concentrated on one
/// image: `eps(x_t, t) = (x_t - sqrt(ab_t) * target) / sqrt(1 - ab_t)`.
#[derive(Clone, Debug)]
pub struct PointMassOracle {
    target: Tensor,
    sched: Arc<NoiseSchedule>,
}

pub fn make_pointmass_oracle(target: Tensor, sched: Arc<NoiseSchedule>) -> Result<PointMassOracle> {
    if !target.is_finite() {
        return Err(Error::InvalidParameter("point-mass target must be finite".into()));
    }
    Ok(PointMassOracle { target, sched })
}

impl PointMassOracle {
    pub fn target(&self) -> &Tensor {
        &self.target
    }
}

impl NoisePredictor for PointMassOracle {
    fn latent_shape(&self) -> &[usize] {
        self.target.shape()
    }

    fn supports_unconditional(&self) -> bool {
        true
    }

    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, _condition: &ConditionRef) -> Result<Var> {
        if t == 0 || t > self.sched.steps() {
            return Err(Error::TimeOutOfRange {
                t,
                min: 1,
                max: self.sched.steps(),
            });
        }
        ensure_shape(self.target.shape(), g.shape(x_t))?;
        let ab = self.sched.alpha_bar(t);
        let inv = 1.0 / (1.0 - ab).sqrt();
        let target = g.constant(self.target.clone());
        g.axpby(inv, x_t, -ab.sqrt() * inv, target)
    }

    fn condition(&self, _prompt: &str) -> Result<ConditionRef> {
        Ok(ConditionRef::unconditional())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn oracle() -> PointMassOracle {
        let target = rng::uniform(&[3, 4, 4], 0.0, 1.0, 5);
        make_pointmass_oracle(target, Arc::new(NoiseSchedule::default())).unwrap()
    }

    #[test]
    fn oracle_is_zero_on_the_clean_mean() {
        let o = oracle();
        let s = NoiseSchedule::default();
        for t in [1, 10, 500, 1000] {
            let x = o.target().map(|v| s.alpha_bar(t).sqrt() * v);
            let eps = o.predict_tensor(&x, t, &ConditionRef::unconditional()).unwrap();
            assert!(eps.max_abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn oracle_inverts_forward_noising() {
        let o = oracle();
        let s = NoiseSchedule::default();
        for t in [1, 2, 333, 999, 1000] {
            let z = rng::gaussian(&[3, 4, 4], t as u64);
            let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            let x = o.target().zip_map(&z, |x0, zv| a * x0 + b * zv).unwrap();
            let eps = o.predict_tensor(&x, t, &ConditionRef::unconditional()).unwrap();
            assert!(eps.max_abs_diff(&z) < 1e-12, "t={t}");
        }
    }

    #[test]
    fn oracle_rejects_t_zero() {
        let o = oracle();
        let r = o.predict_tensor(o.target(), 0, &ConditionRef::unconditional());
        assert!(matches!(r, Err(Error::TimeOutOfRange { t: 0, .. })));
    }

    #[test]
    fn identity_codec_round_trip_is_exact() {
        let c = IdentityCodec::new(&[3, 5, 5]);
        let p = rng::uniform(&[3, 5, 5], 0.0, 1.0, 1);
        assert_eq!(c.decode(&c.encode(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn decode_lands_in_unit_range() {
        let z = rng::gaussian(&[3, 4, 4], 3).map(|v| 4.0 * v);
        for out in [
            IdentityCodec::new(&[3, 4, 4]).decode(&z).unwrap(),
            PoolCodec::new(&[3, 8, 8]).unwrap().decode(&z).unwrap(),
        ] {
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pool_codec_preserves_constant_images() {
        let c = PoolCodec::new(&[3, 8, 8]).unwrap();
        let p = Tensor::full(&[3, 8, 8], 0.25);
        let back = c.decode(&c.encode(&p).unwrap()).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-15);
        assert!(PoolCodec::new(&[3, 7, 8]).is_err());
    }
}

#![allow(dead_code)]

use patchsmith::autograd::{Graph, Var};
use patchsmith::detector::{make_toy_detector, ToyDetector, ToyDetectorConfig};
use patchsmith::diffusion::NoiseSchedule;
use patchsmith::generator::{
    make_pointmass_oracle, make_toy_predictor, ConditionRef, GenerationCodec, NoisePredictor, PointMassOracle,
    ScaledCodec, ToyPredictor, ToyTrainConfig, DEFAULT_LATENT_SCALE,
};
use patchsmith::{synth, Result, Tensor};
use std::cell::Cell;
use std::sync::{Arc, OnceLock};

pub const PATCH: usize = 16;

pub fn schedule() -> Arc<NoiseSchedule> {
    Arc::new(NoiseSchedule::default())
}

pub fn codec() -> ScaledCodec {
    ScaledCodec::new(&[3, PATCH, PATCH], DEFAULT_LATENT_SCALE).unwrap()
}

/// The default toy detector, trained once per test binary.
pub fn detector() -> &'static ToyDetector {
    static DET: OnceLock<ToyDetector> = OnceLock::new();
    DET.get_or_init(|| make_toy_detector(&ToyDetectorConfig::default()).expect("toy detector fixture"))
}

/// Encoded stripes/checker textures the toy generator trains on.
pub fn texture_latents() -> Vec<(Tensor, usize)> {
    let codec = codec();
    synth::texture_set(64, PATCH, 1)
        .into_iter()
        .map(|(t, l)| (codec.encode(&t).unwrap(), l))
        .collect()
}

/// The toy generator, trained once per test binary.
pub fn generator() -> &'static ToyPredictor {
    static GEN: OnceLock<ToyPredictor> = OnceLock::new();
    GEN.get_or_init(|| {
        make_toy_predictor(&texture_latents(), &synth::TEXTURE_LABELS, schedule(), &ToyTrainConfig::default())
            .expect("toy generator fixture")
    })
}

pub fn oracle(target: Tensor) -> PointMassOracle {
    make_pointmass_oracle(target, schedule()).unwrap()
}

/// Wraps a predictor and counts its invocations.
pub struct Counting<P> {
    pub inner: P,
    pub calls: Cell<usize>,
    pub times: std::cell::RefCell<Vec<usize>>,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
            times: Default::default(),
        }
    }
}

impl<P: NoisePredictor> NoisePredictor for Counting<P> {
    fn latent_shape(&self) -> &[usize] {
        self.inner.latent_shape()
    }

    fn supports_unconditional(&self) -> bool {
        self.inner.supports_unconditional()
    }

    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, condition: &ConditionRef) -> Result<Var> {
        self.calls.set(self.calls.get() + 1);
        self.times.borrow_mut().push(t);
        self.inner.predict(g, x_t, t, condition)
    }
}

/// Central finite difference of `f` at coordinate `i` of `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut plus = x.data().to_vec();
    let mut minus = x.data().to_vec();
    plus[i] += h;
    minus[i] -= h;
    let p = Tensor::try_new(x.shape(), plus).unwrap();
    let m = Tensor::try_new(x.shape(), minus).unwrap();
    (f(&p) - f(&m)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

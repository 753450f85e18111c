//! Noise schedules, forward noising, DDPM ancestral sampling, DDIM stepping,
//! adversarial patch sampling (APS) and classifier-free guidance.
//!
//! Time indices follow the usual convention: `t = 0` is clean data and
//! `t = T` is (almost) pure noise. `alpha_bar(0) = 1` is stored explicitly.

use crate::autograd::{Graph, Var};
use crate::error::{ensure_shape, Error, Result};
use crate::generator::{ConditionRef, NoisePredictor};
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// `beta_t` linear in `t` from `beta_min` to `beta_max`.
    Linear { beta_min: f64, beta_max: f64 },
    /// `sqrt(beta_t)` linear in `t` (the latent-diffusion convention).
    ScaledLinear { beta_min: f64, beta_max: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

pub const DEFAULT_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, ScheduleKind::default()).expect("default schedule is valid")
    }
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
    }
    let (lo, hi) = match kind {
        ScheduleKind::Linear { beta_min, beta_max } | ScheduleKind::ScaledLinear { beta_min, beta_max } => {
            (beta_min, beta_max)
        }
    };
    // Equal bounds are accepted so that constant schedules can be built.
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{lo}, {hi}]"
        )));
    }
    let frac = |i: usize| {
        if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear { .. } => lo + (hi - lo) * frac(i),
            ScheduleKind::ScaledLinear { .. } => {
                let s = lo.sqrt() + (hi.sqrt() - lo.sqrt()) * frac(i);
                s * s
            }
        })
        .collect();
    NoiseSchedule::from_betas(&betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self { alpha, alpha_bar })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            Err(Error::TimeOutOfRange {
                t,
                min,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// A point in generation space together with its time index and condition.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub value: Tensor,
    pub t: usize,
    pub condition: ConditionRef,
}

impl LatentState {
    pub fn clean(value: Tensor, condition: ConditionRef) -> Self {
        Self {
            value,
            t: 0,
            condition,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub t_start: usize,
    /// Stride between denoising steps.
    pub step: usize,
    /// DDIM stochasticity; APS requires zero.
    pub sigma: f64,
    pub cfg_weight: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t_start: 500,
            step: 166,
            sigma: 0.0,
            cfg_weight: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.sigma != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "APS is deterministic and needs sigma = 0, got {}",
                self.sigma
            )));
        }
        if self.step < 1 {
            return Err(Error::InvalidConfig("step size s must be >= 1".into()));
        }
        if self.t_start < 1 || self.t_start > sched.steps() {
            return Err(Error::InvalidConfig(format!(
                "t_start {} outside [1, {}]",
                self.t_start,
                sched.steps()
            )));
        }
        if !(self.cfg_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cfg weight must be >= 0, got {}",
                self.cfg_weight
            )));
        }
        Ok(())
    }
}

/// Samples `x_t ~ q(x_t | x_0)` given explicit standard-normal `noise`.
pub fn forward_diffuse(x0: &LatentState, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<LatentState> {
    if x0.t != 0 {
        return Err(Error::InvalidParameter(format!(
            "forward diffusion starts from a clean latent, got t = {}",
            x0.t
        )));
    }
    sched.check_t(t, 0)?;
    ensure_shape(x0.value.shape(), noise.shape())?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let value = x0.value.zip_map(noise, |x, z| a * x + b * z)?;
    Ok(LatentState {
        value,
        t,
        condition: x0.condition.clone(),
    })
}

/// Ancestral DDPM sampling from `x_T ~ N(0, I)` down to `x_0`, with the
/// fixed variance `sigma_t = sqrt(beta_t)` and no noise on the final step.
pub fn ddpm_sample(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    condition: &ConditionRef,
    seed: u64,
) -> Result<LatentState> {
    let shape = predictor.latent_shape().to_vec();
    let mut x = rng::gaussian(&shape, rng::derive_named(seed, "ddpm-init"));
    for t in (1..=sched.steps()).rev() {
        let eps = predictor.predict_tensor(&x, t, condition).map_err(|e| e.at_step(t))?;
        ensure_shape(&shape, eps.shape()).map_err(|e| e.at_step(t))?;
        let a = sched.alpha(t);
        let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / a.sqrt();
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - coef * ev))?;
        if t > 1 {
            let z = rng::gaussian(&shape, rng::derive(seed, t as u64));
            let sd = sched.beta(t).sqrt();
            next = next.zip_map(&z, |v, zv| v + sd * zv)?;
        }
        x = next;
    }
    Ok(LatentState {
        value: x,
        t: 0,
        condition: condition.clone(),
    })
}

/// One DDIM update from `t` to `t - 1`.
pub fn ddim_step(
    x_t: &LatentState,
    predicted_noise: &Tensor,
    sched: &NoiseSchedule,
    sigma: f64,
    fresh_noise: &Tensor,
) -> Result<LatentState> {
    if x_t.t < 1 {
        return Err(Error::TimeOutOfRange {
            t: x_t.t,
            min: 1,
            max: sched.steps(),
        });
    }
    ddim_step_to(x_t, predicted_noise, x_t.t - 1, sched, sigma, fresh_noise)
}

/// DDIM update from `x_t.t` to an arbitrary earlier index `t_prev`.
pub fn ddim_step_to(
    x_t: &LatentState,
    predicted_noise: &Tensor,
    t_prev: usize,
    sched: &NoiseSchedule,
    sigma: f64,
    fresh_noise: &Tensor,
) -> Result<LatentState> {
    sched.check_t(x_t.t, 1)?;
    if t_prev >= x_t.t {
        return Err(Error::InvalidParameter(format!(
            "DDIM target {t_prev} must precede {}",
            x_t.t
        )));
    }
    ensure_shape(x_t.value.shape(), predicted_noise.shape())?;
    ensure_shape(x_t.value.shape(), fresh_noise.shape())?;
    let ab_prev = sched.alpha_bar(t_prev);
    let residual = 1.0 - ab_prev - sigma * sigma;
    if !(sigma >= 0.0) || residual < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_(t-1) = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let ab = sched.alpha_bar(x_t.t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pr) = (ab_prev.sqrt(), residual.sqrt());
    let data = x_t
        .value
        .data()
        .iter()
        .zip(predicted_noise.data())
        .zip(fresh_noise.data())
        .map(|((&x, &e), &z)| {
            let x0_hat = (x - sb * e) / sa;
            let mut v = pa * x0_hat + pr * e;
            // sigma == 0 must not depend on fresh_noise at all, even for non-finite draws
            if sigma != 0.0 {
                v += sigma * z;
            }
            v
        })
        .collect();
    Ok(LatentState {
        value: Tensor::new(x_t.value.shape(), data),
        t: t_prev,
        condition: x_t.condition.clone(),
    })
}

/// The time indices at which APS evaluates the noise predictor: the loop
/// visits `t_start, t_start - s, ...` while `t >= 2s`, and the return line
/// evaluates once more at the first `t < 2s`.
pub fn aps_timesteps(t_start: usize, step: usize) -> Vec<usize> {
    let mut ts = Vec::new();
    let mut t = t_start;
    while t >= 2 * step {
        ts.push(t);
        t -= step;
    }
    ts.push(t);
    ts
}

/// Noise prediction with optional classifier-free guidance; `w = 1` (or an
/// unconditional condition) uses the conditional prediction directly.
fn guided_noise(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    x: Var,
    t: usize,
    condition: &ConditionRef,
    w: f64,
) -> Result<Var> {
    if w == 1.0 || condition.is_unconditional() {
        predictor.predict(g, x, t, condition)
    } else {
        cfg_predict_graph(g, predictor, x, t, condition, w)
    }
}

/// Differentiable APS. `x0 = None` is the initial-patch mode, which requires
/// `t_start = T` and starts from pure noise.
pub fn aps_sample_graph(
    g: &mut Graph,
    x0: Option<Var>,
    condition: &ConditionRef,
    cfg: &SamplerConfig,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    cfg.validate(sched)?;
    let shape = predictor.latent_shape().to_vec();
    let z = g.constant(rng::gaussian(&shape, rng::derive_named(cfg.seed, "aps-init")));
    let mut x = match x0 {
        Some(x0) => {
            ensure_shape(&shape, g.shape(x0))?;
            let ab = sched.alpha_bar(cfg.t_start);
            g.axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), z)?
        }
        None => {
            if cfg.t_start != sched.steps() {
                return Err(Error::InvalidConfig(format!(
                    "sampling without an input patch needs t_start = T = {}, got {}",
                    sched.steps(),
                    cfg.t_start
                )));
            }
            z
        }
    };
    let timesteps = aps_timesteps(cfg.t_start, cfg.step);
    let (&last, loop_ts) = timesteps.split_last().expect("at least the return step");
    for &t in loop_ts {
        let eps = guided_noise(g, predictor, x, t, condition, cfg.cfg_weight).map_err(|e| e.at_step(t))?;
        ensure_shape(&shape, g.shape(eps)).map_err(|e| e.at_step(t))?;
        // x_{t-s} = sqrt(ab') * x0_hat + sqrt(1 - ab') * eps, with
        // x0_hat = (x_t - sqrt(1 - ab) * eps) / sqrt(ab)
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - cfg.step));
        let ca = ab_prev.sqrt() / ab.sqrt();
        let ce = (1.0 - ab_prev).sqrt() - ca * (1.0 - ab).sqrt();
        x = g.axpby(ca, x, ce, eps)?;
    }
    let eps = guided_noise(g, predictor, x, last, condition, cfg.cfg_weight).map_err(|e| e.at_step(last))?;
    ensure_shape(&shape, g.shape(eps)).map_err(|e| e.at_step(last))?;
    let ab = sched.alpha_bar(last);
    // return line evaluated at alpha_bar_0 = 1, i.e. exactly x0_hat
    let ca = sched.alpha_bar(0).sqrt() / ab.sqrt();
    let ce = (1.0 - sched.alpha_bar(0)).sqrt() - ca * (1.0 - ab).sqrt();
    g.axpby(ca, x, ce, eps)
}

/// APS on plain tensors.
pub fn aps_sample(
    x0: Option<&LatentState>,
    condition: &ConditionRef,
    cfg: &SamplerConfig,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    if let Some(x0) = x0 {
        if x0.t != 0 {
            return Err(Error::InvalidConfig(format!(
                "APS input must be a clean latent, got t = {}",
                x0.t
            )));
        }
    }
    let mut g = Graph::new();
    let x0v = x0.map(|s| g.constant(s.value.clone()));
    let out = aps_sample_graph(&mut g, x0v, condition, cfg, predictor, sched)?;
    Ok(LatentState {
        value: g.value(out).clone(),
        t: 0,
        condition: condition.clone(),
    })
}

/// `eps_u + w * (eps_c - eps_u)`, evaluated as `(1 - w) * eps_u + w * eps_c`
/// so that `w = 0` and `w = 1` reproduce the inputs bit for bit.
pub fn cfg_predict_graph(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    x_t: Var,
    t: usize,
    condition: &ConditionRef,
    w: f64,
) -> Result<Var> {
    if !predictor.supports_unconditional() {
        return Err(Error::UnsupportedCapability(
            "classifier-free guidance needs an unconditional prediction".into(),
        ));
    }
    let eps_c = predictor.predict(g, x_t, t, condition)?;
    let eps_u = predictor.predict(g, x_t, t, &ConditionRef::unconditional())?;
    g.axpby(1.0 - w, eps_u, w, eps_c)
}

pub fn cfg_predict(
    predictor: &dyn NoisePredictor,
    x_t: &LatentState,
    condition: &ConditionRef,
    w: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_t.value.clone());
    let out = cfg_predict_graph(&mut g, predictor, x, x_t.t, condition, w)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, ScheduleKind::Linear { beta_min: 0.5, beta_max: 0.5 }).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn three_step_product() {
        let s = build_schedule(3, ScheduleKind::Linear { beta_min: 0.1, beta_max: 0.3 }).unwrap();
        assert!((s.alpha_bar(3) - 0.9 * 0.8 * 0.7).abs() < 1e-15);
        assert!((s.alpha_bar(3) - 0.504).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        let mut direct = 1.0;
        for t in 1..=1000 {
            let a = s.alpha(t);
            assert!(a > 0.0 && a < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * a);
            direct *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
            assert!((direct - s.alpha_bar(t)).abs() < 1e-12);
        }
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(build_schedule(0, ScheduleKind::default()).is_err());
        for (lo, hi) in [(0.0, 0.02), (0.03, 0.02), (0.1, 1.0), (-0.1, 0.2)] {
            let r = build_schedule(10, ScheduleKind::Linear { beta_min: lo, beta_max: hi });
            assert!(matches!(r, Err(Error::InvalidParameter(_))), "{lo} {hi}");
        }
    }

    #[test]
    fn aps_timesteps_default_setting() {
        assert_eq!(aps_timesteps(500, 166), vec![500, 334, 168]);
        // loop skipped entirely when t_start < 2s
        assert_eq!(aps_timesteps(166, 166), vec![166]);
        assert_eq!(aps_timesteps(1000, 166), vec![1000, 834, 668, 502, 336, 170]);
    }

    #[test]
    fn sampler_config_validation() {
        let s = NoiseSchedule::default();
        let ok = SamplerConfig::default();
        assert!(ok.validate(&s).is_ok());
        for bad in [
            SamplerConfig { sigma: 0.1, ..ok.clone() },
            SamplerConfig { step: 0, ..ok.clone() },
            SamplerConfig { t_start: 1001, ..ok.clone() },
            SamplerConfig { t_start: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(&s), Err(Error::InvalidConfig(_))));
        }
    }
}

mod common;

use common::{codec, generator, oracle, schedule, PATCH};
use patchsmith::autograd::Graph;
use patchsmith::diffusion::{LatentState, SamplerConfig};
use patchsmith::error::{Error, Result};
use patchsmith::generator::{ConditionRef, GenerationCodec, NoisePredictor};
use patchsmith::objective::{LossBreakdown, PatchObjective};
use patchsmith::optimizer::*;
use patchsmith::render::SceneSample;
use patchsmith::{rng, synth, Tensor};

fn one_scene() -> Vec<SceneSample> {
    vec![SceneSample::new(Tensor::full(&[3, 8, 8], 0.5), &[], "blank").unwrap()]
}

fn stripes() -> ConditionRef {
    ConditionRef::label("stripes", 0)
}

fn latent_of(label: usize, seed: u64) -> LatentState {
    LatentState::clean(codec().encode(&synth::texture(label, PATCH, seed)).unwrap(), stripes())
}

fn surrogate<'a>(predictor: &'a dyn NoisePredictor, c: &'a dyn GenerationCodec, target: Tensor) -> QuadraticSurrogate<'a> {
    static SCHED: std::sync::OnceLock<std::sync::Arc<patchsmith::diffusion::NoiseSchedule>> = std::sync::OnceLock::new();
    QuadraticSurrogate {
        predictor,
        codec: c,
        schedule: SCHED.get_or_init(schedule),
        target,
    }
}

fn low_noise(seed: u64) -> SamplerConfig {
    SamplerConfig {
        t_start: 10,
        step: 10,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_return_the_init() {
    let c = codec();
    let o = oracle(latent_of(1, 2).value);
    let obj = surrogate(&o, &c, Tensor::zeros(&[3, PATCH, PATCH]));
    let init = latent_of(0, 1);
    let cfg = OptimizeConfig {
        max_iterations: 0,
        ..Default::default()
    };
    let (out, trace) = optimize_patch(&init, &one_scene(), &cfg, &obj, &CheckpointSink::default()).unwrap();
    assert_eq!(out, init);
    assert!(trace.is_empty() && trace.checkpoints.is_empty() && trace.best.is_none());
    assert_eq!(trace.to_csv(), format!("{}\n", OptimizeTrace::CSV_HEADER));
}

#[test]
fn quadratic_surrogate_converges_to_its_target() {
    let c = codec();
    let target = synth::texture(1, PATCH, 9);
    let obj = surrogate(generator(), &c, target.clone());
    let cfg = OptimizeConfig {
        max_iterations: 2000,
        batch_size: 1,
        sampler: low_noise(0),
        seed: 3,
        ..Default::default()
    };
    let init = latent_of(0, 1);
    let start = obj.resample(&init, &cfg.validation_sampler()).unwrap();
    let (best, trace) = optimize_patch(&init, &one_scene(), &cfg, &obj, &CheckpointSink::default()).unwrap();
    assert_eq!(trace.len(), 2000);
    let patch = resample_patch(&best, &cfg.validation_sampler(), &obj).unwrap();
    let err = |p: &Tensor| p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    assert!(err(&start) > 0.1, "start {}", err(&start));
    assert!(err(&patch) < 1e-2, "mean abs error {}", err(&patch));
}

#[test]
fn runs_are_reproducible_and_keep_the_best_checkpoint() {
    let c = codec();
    let obj = surrogate(generator(), &c, synth::texture(1, PATCH, 9));
    let scenes: Vec<SceneSample> = (0..5)
        .map(|i| SceneSample::new(Tensor::full(&[3, 8, 8], 0.1 * i as f64), &[], "s").unwrap())
        .collect();
    let cfg = OptimizeConfig {
        max_iterations: 40,
        batch_size: 2,
        lr: 0.05,
        sampler: SamplerConfig {
            t_start: 100,
            step: 50,
            ..Default::default()
        },
        validation_fraction: 0.2,
        validate_every: 3,
        seed: 5,
        ..Default::default()
    };
    let init = latent_of(0, 1);
    let run = || optimize_patch(&init, &scenes, &cfg, &obj, &CheckpointSink::default()).unwrap();
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta.to_csv(), tb.to_csv());
    assert_eq!(ta.checkpoints, tb.checkpoints);
    assert_eq!(ta.len(), 40);
    let best_total = ta.checkpoints[ta.best.unwrap()].validation_total;
    assert!(ta.checkpoints.iter().all(|c| best_total <= c.validation_total));
    let recomputed = obj.evaluate(&a, &scenes, &cfg.validation_sampler(), cfg.lambda, false).unwrap().0.total;
    assert!((recomputed - best_total).abs() < 1e-12);
    assert_eq!(a.value.digest(), ta.checkpoints[ta.best.unwrap()].digest);

    let other = OptimizeConfig { seed: 6, ..cfg.clone() };
    let (_, tc) = optimize_patch(&init, &scenes, &other, &obj, &CheckpointSink::default()).unwrap();
    assert_ne!(tc.to_csv(), ta.to_csv());
}

/// Constant loss with zero gradient, so every epoch is flat.
struct Flat;

impl PatchObjective for Flat {
    fn evaluate(&self, l: &LatentState, _: &[SceneSample], _: &SamplerConfig, lambda: f64, g: bool) -> Result<(LossBreakdown, Option<Tensor>)> {
        Ok((LossBreakdown::new(1.0, 0.0, lambda), g.then(|| Tensor::zeros(l.value.shape()))))
    }

    fn resample(&self, l: &LatentState, _: &SamplerConfig) -> Result<Tensor> {
        Ok(l.value.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[test]
fn learning_rate_only_drops_by_the_decay_factor() {
    let cfg = OptimizeConfig {
        max_iterations: 60,
        batch_size: 1,
        lr_patience: 3,
        lr_decay_factor: 0.5,
        ..Default::default()
    };
    let (_, trace) = optimize_patch(&latent_of(0, 1), &one_scene(), &cfg, &Flat, &CheckpointSink::default()).unwrap();
    let lr = trace.lr_history();
    assert_eq!(lr[0], cfg.lr);
    let mut drops = 0;
    for w in lr.windows(2) {
        assert!(w[1] <= w[0]);
        if w[1] < w[0] {
            assert_eq!(w[1], w[0] * cfg.lr_decay_factor);
            drops += 1;
        }
    }
    // first epoch has no predecessor, then every third flat epoch decays
    assert_eq!(drops, (60 - 1) / 3);
}

struct Nan;

impl PatchObjective for Nan {
    fn evaluate(&self, l: &LatentState, _: &[SceneSample], _: &SamplerConfig, lambda: f64, g: bool) -> Result<(LossBreakdown, Option<Tensor>)> {
        let v = if g { f64::NAN } else { 1.0 };
        Ok((LossBreakdown::new(v, 0.0, lambda), g.then(|| Tensor::zeros(l.value.shape()))))
    }

    fn resample(&self, l: &LatentState, _: &SamplerConfig) -> Result<Tensor> {
        Ok(l.value.clone())
    }
}

#[test]
fn a_nan_loss_aborts_with_the_latent_digest() {
    let init = latent_of(0, 1);
    let cfg = OptimizeConfig {
        max_iterations: 5,
        ..Default::default()
    };
    let err = optimize_patch(&init, &one_scene(), &cfg, &Nan, &CheckpointSink::default()).unwrap_err();
    match err {
        Error::Numeric(msg) => {
            assert!(msg.contains("iteration 0"), "{msg}");
            assert!(msg.contains(&init.value.digest()), "{msg}");
        }
        other => panic!("expected a numeric error, got {other}"),
    }
}

#[test]
fn init_from_the_point_mass_oracle_is_its_target() {
    let target = latent_of(1, 7).value;
    let o = oracle(target.clone());
    let sched = schedule();
    let cfg = SamplerConfig {
        t_start: sched.steps(),
        seed: 4,
        ..Default::default()
    };
    let init = init_patch(&cfg, &stripes(), &o, &sched).unwrap();
    assert_eq!(init.t, 0);
    assert_eq!(init.condition, stripes());
    assert!(init.value.max_abs_diff(&target) < 1e-6);
    assert_eq!(init_patch(&cfg, &stripes(), &o, &sched).unwrap(), init);
    assert!(matches!(
        init_patch(&SamplerConfig::default(), &stripes(), &o, &sched),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn toy_init_decodes_into_the_unit_cube() {
    let sched = schedule();
    let cfg = SamplerConfig {
        t_start: sched.steps(),
        seed: 2,
        ..Default::default()
    };
    let init = init_patch(&cfg, &stripes(), generator(), &sched).unwrap();
    let p = codec().decode(&init.value).unwrap();
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn resampling_the_oracle_returns_its_target_at_any_depth() {
    let c = codec();
    let target = latent_of(1, 3).value;
    let o = oracle(target.clone());
    let obj = surrogate(&o, &c, Tensor::zeros(&[3, PATCH, PATCH]));
    let want = c.decode(&target).unwrap();
    for (t_start, step) in [(2, 2), (200, 10), (500, 166), (999, 333)] {
        let cfg = SamplerConfig {
            t_start,
            step,
            seed: t_start as u64,
            ..Default::default()
        };
        let p = resample_patch(&latent_of(0, 1), &cfg, &obj).unwrap();
        assert!(p.max_abs_diff(&want) < 1e-6, "t_start {t_start}");
    }
    let mut noisy = latent_of(0, 1);
    noisy.t = 3;
    assert!(resample_patch(&noisy, &SamplerConfig::default(), &obj).is_err());
}

#[test]
fn a_single_step_resample_is_the_predicted_clean_latent() {
    let c = codec();
    let sched = schedule();
    let obj = surrogate(generator(), &c, Tensor::zeros(&[3, PATCH, PATCH]));
    let latent = latent_of(0, 1);
    let cfg = SamplerConfig {
        t_start: 300,
        step: 300,
        seed: 8,
        ..Default::default()
    };
    let got = resample_patch(&latent, &cfg, &obj).unwrap();
    // the sampler's noise for x_t is the only draw it makes
    let noise = rng::gaussian(latent.value.shape(), rng::derive_named(cfg.seed, "aps-init"));
    let a = sched.alpha_bar(300);
    let x_t = latent.value.zip_map(&noise, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x_t.clone());
    let eps = generator().predict(&mut g, xv, 300, &latent.condition).unwrap();
    let eps = g.value(eps).clone();
    let x0 = x_t.zip_map(&eps, |x, e| (x - (1.0 - a).sqrt() * e) / a.sqrt()).unwrap();
    let want = c.decode(&x0).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-9, "{}", got.max_abs_diff(&want));
}

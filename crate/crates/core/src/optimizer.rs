//! The outer attack loop: initial patch, Adam on the patch latent, plateau
//! learning-rate decay and best-checkpoint selection on a validation split.

use crate::autograd::Graph;
use crate::diffusion::{aps_sample, LatentState, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::generator::{ConditionRef, GenerationCodec, NoisePredictor};
use crate::objective::{LossBreakdown, PatchObjective};
use crate::optim::{Adam, AdamConfig};
use crate::render::SceneSample;
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Consecutive flat epochs before the learning rate drops.
    pub lr_patience: usize,
    /// An epoch is flat when its mean total moves by less than this.
    pub loss_delta_threshold: f64,
    pub lambda: f64,
    pub sampler: SamplerConfig,
    /// Fraction of scenes held out to pick the best latent.
    pub validation_fraction: f64,
    /// Iterations between validation checkpoints; 0 checks once per epoch.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            batch_size: 8,
            lr: 0.005,
            lr_decay_factor: 0.5,
            lr_patience: 10,
            loss_delta_threshold: 1e-4,
            lambda: 0.1,
            sampler: SamplerConfig::default(),
            validation_fraction: 0.1,
            validate_every: 0,
            seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.sampler.validate(sched)?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }

    /// Sampler seed of iteration `iter`.
    pub fn iteration_seed(&self, iter: usize) -> u64 {
        rng::derive(rng::derive_named(self.seed, "sampler"), iter as u64)
    }

    /// Fixed sampler used for validation and for the emitted patch.
    pub fn validation_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: rng::derive_named(self.seed, "validation"),
            ..self.sampler.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// Iterations completed when the checkpoint was taken.
    pub iteration: usize,
    pub validation_total: f64,
    pub digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeTrace {
    pub iterations: Vec<IterationRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Index into `checkpoints` of the returned latent.
    pub best: Option<usize>,
}

impl OptimizeTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn lr_history(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.lr).collect()
    }

    pub const CSV_HEADER: &'static str = "iteration,det_term,tv_term,total,lr";

    /// `iteration,det_term,tv_term,total,lr` rows; no timing, so equal
    /// runs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.iterations {
            out.push_str(&csv_row(r));
        }
        out
    }
}

fn csv_row(r: &IterationRecord) -> String {
    format!(
        "{},{},{},{},{}\n",
        r.iteration, r.loss.det_term, r.loss.tv_term, r.loss.total, r.lr
    )
}

/// Initial patch: APS from pure noise, which needs
/// `t_start = T`.
pub fn init_patch(
    cfg: &SamplerConfig,
    condition: &ConditionRef,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    if cfg.t_start != sched.steps() {
        return Err(Error::InvalidConfig(format!(
            "initial patch generation needs t_start = T = {}, got {}",
            sched.steps(),
            cfg.t_start
        )));
    }
    aps_sample(None, condition, cfg, predictor, sched)
}

/// The pixel patch a clean latent realizes under `cfg`.
pub fn resample_patch(latent: &LatentState, cfg: &SamplerConfig, objective: &dyn PatchObjective) -> Result<Tensor> {
    if latent.t != 0 {
        return Err(Error::InvalidConfig(format!("resampling needs a clean latent, got t = {}", latent.t)));
    }
    objective.resample(latent, cfg)
}

/// Deterministic train/validation split of `n` scenes.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(rng::derive_named(seed, "split")));
    let n_val = if n < 2 || fraction == 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Where checkpoints go; `None` keeps them in memory only.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    fn write(&self, iter: usize, latent: &LatentState, patch: &Tensor, row: Option<&IterationRecord>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let stem = dir.join(format!("ckpt_{iter:06}"));
        crate::io::write_tensor(&stem.with_extension("json"), &latent.value)?;
        crate::io::write_png(&stem.with_extension("png"), patch)?;
        let mut csv = format!("{}\n", OptimizeTrace::CSV_HEADER);
        if let Some(r) = row {
            csv.push_str(&csv_row(r));
        }
        std::fs::write(stem.with_extension("csv"), csv)?;
        Ok(())
    }
}

fn mean_total(objective: &dyn PatchObjective, latent: &LatentState, scenes: &[SceneSample], sampler: &SamplerConfig, lambda: f64) -> Result<f64> {
    Ok(objective.evaluate(latent, scenes, sampler, lambda, false)?.0.total)
}

/// Minimizes `objective` over the latent with Adam. Returns the latent with
/// the lowest validation objective among all checkpoints (the initial one
/// included) and the full trace.
pub fn optimize_patch(
    init: &LatentState,
    scenes: &[SceneSample],
    cfg: &OptimizeConfig,
    objective: &dyn PatchObjective,
    sink: &CheckpointSink,
) -> Result<(LatentState, OptimizeTrace)> {
    if scenes.is_empty() {
        return Err(Error::InvalidParameter("optimize_patch needs at least one scene".into()));
    }
    if init.t != 0 {
        return Err(Error::InvalidConfig(format!("initial latent must be clean, got t = {}", init.t)));
    }
    let mut trace = OptimizeTrace::default();
    if cfg.max_iterations == 0 {
        return Ok((init.clone(), trace));
    }
    let (train_idx, val_idx) = split_indices(scenes.len(), cfg.validation_fraction, cfg.seed);
    let train: Vec<SceneSample> = train_idx.iter().map(|&i| scenes[i].clone()).collect();
    let val: Vec<SceneSample> = if val_idx.is_empty() {
        train.clone()
    } else {
        val_idx.iter().map(|&i| scenes[i].clone()).collect()
    };
    let val_sampler = cfg.validation_sampler();

    let mut latent = init.clone();
    let mut params = vec![latent.value.clone()];
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &params,
    );
    let mut best = (mean_total(objective, &latent, &val, &val_sampler, cfg.lambda)?, latent.clone());
    let checkpoint = |trace: &mut OptimizeTrace, latent: &LatentState, total: f64, iter: usize| -> Result<()> {
        trace.checkpoints.push(CheckpointRecord {
            iteration: iter,
            validation_total: total,
            digest: latent.value.digest(),
        });
        let patch = objective.resample(latent, &val_sampler)?;
        sink.write(iter, latent, &patch, trace.iterations.last())
    };
    checkpoint(&mut trace, &latent, best.0, 0)?;
    trace.best = Some(0);

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch_totals: Vec<f64> = Vec::new();
    let mut prev_epoch_mean: Option<f64> = None;
    let mut flat_epochs = 0usize;
    let mut epoch = 0u64;
    for iter in 0..cfg.max_iterations {
        let started = Instant::now();
        let slot = iter % batches_per_epoch;
        if slot == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng::rng(rng::derive(rng::derive_named(cfg.seed, "epoch"), epoch)));
            epoch += 1;
        }
        let end = ((slot + 1) * cfg.batch_size).min(train.len());
        let batch: Vec<SceneSample> = order[slot * cfg.batch_size..end].iter().map(|&i| train[i].clone()).collect();
        let sampler = SamplerConfig {
            seed: cfg.iteration_seed(iter),
            ..cfg.sampler.clone()
        };
        let (loss, grad) = objective.evaluate(&latent, &batch, &sampler, cfg.lambda, true)?;
        let grad = grad.expect("gradient requested");
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter} (latent {}, sampler seed {})",
                latent.value.digest(),
                sampler.seed
            )));
        }
        let lr = adam.cfg.lr;
        adam.step(&mut params, &[grad]);
        latent.value = params[0].clone();
        trace.iterations.push(IterationRecord {
            iteration: iter,
            loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        epoch_totals.push(loss.total);

        let epoch_done = slot + 1 == batches_per_epoch;
        if epoch_done {
            let mean = epoch_totals.iter().sum::<f64>() / epoch_totals.len() as f64;
            epoch_totals.clear();
            if let Some(prev) = prev_epoch_mean {
                if (mean - prev).abs() < cfg.loss_delta_threshold {
                    flat_epochs += 1;
                } else {
                    flat_epochs = 0;
                }
            }
            prev_epoch_mean = Some(mean);
            if flat_epochs >= cfg.lr_patience {
                adam.cfg.lr *= cfg.lr_decay_factor;
                flat_epochs = 0;
            }
        }
        let due = if cfg.validate_every == 0 {
            epoch_done
        } else {
            (iter + 1) % cfg.validate_every == 0
        };
        if due || iter + 1 == cfg.max_iterations {
            let total = mean_total(objective, &latent, &val, &val_sampler, cfg.lambda)?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite validation loss after iteration {iter} (latent {})",
                    latent.value.digest()
                )));
            }
            checkpoint(&mut trace, &latent, total, iter + 1)?;
            if total < best.0 {
                best = (total, latent.clone());
                trace.best = Some(trace.checkpoints.len() - 1);
            }
        }
    }
    Ok((best.1, trace))
}

/// `||P' - target||^2` in place of the detector stack, for checking the
/// optimizer against a convex target.
pub struct QuadraticSurrogate<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub codec: &'a dyn GenerationCodec,
    pub schedule: &'a NoiseSchedule,
    pub target: Tensor,
}

impl QuadraticSurrogate<'_> {
    fn build(&self, g: &mut Graph, x0: crate::autograd::Var, latent: &LatentState, sampler: &SamplerConfig) -> Result<crate::autograd::Var> {
        let z = crate::diffusion::aps_sample_graph(g, Some(x0), &latent.condition, sampler, self.predictor, self.schedule)?;
        self.codec.decode_graph(g, z)
    }
}

impl PatchObjective for QuadraticSurrogate<'_> {
    fn evaluate(
        &self,
        latent: &LatentState,
        _scenes: &[SceneSample],
        sampler: &SamplerConfig,
        lambda: f64,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Tensor>)> {
        let mut g = Graph::new();
        let x0 = if with_grad {
            g.param(latent.value.clone())
        } else {
            g.constant(latent.value.clone())
        };
        let p = self.build(&mut g, x0, latent, sampler)?;
        let t = g.constant(self.target.clone());
        let d = g.sub(p, t)?;
        let sq = g.square(d);
        let loss = g.sum(sq);
        let value = g.scalar(loss);
        let grad = with_grad.then(|| g.backward(loss).get_or_zeros(x0));
        Ok((LossBreakdown::new(value, 0.0, lambda), grad))
    }

    fn resample(&self, latent: &LatentState, sampler: &SamplerConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let x0 = g.constant(latent.value.clone());
        let p = self.build(&mut g, x0, latent, sampler)?;
        Ok(g.value(p).clone())
    }
}

/// Writes the optimized patch, the trace and the best latent to `dir`.
pub fn write_attack_outputs(
    dir: &Path,
    best: &LatentState,
    trace: &OptimizeTrace,
    final_patch: &Tensor,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::write_png(&dir.join("patch_final.png"), final_patch)?;
    crate::io::write_tensor(&dir.join("latent_final.json"), &best.value)?;
    std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t1, v1) = split_indices(50, 0.1, 3);
        let (t2, v2) = split_indices(50, 0.1, 3);
        assert_eq!((t1.clone(), v1.clone()), (t2, v2));
        assert_eq!(v1.len(), 5);
        let mut all: Vec<usize> = t1.into_iter().chain(v1).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_corpora_validate_on_the_training_set() {
        assert_eq!(split_indices(1, 0.1, 0).1, Vec::<usize>::new());
        assert_eq!(split_indices(3, 0.1, 0).1.len(), 1);
    }
}

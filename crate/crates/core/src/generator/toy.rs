//! A small trainable label-conditioned denoiser.
//!
//! The network predicts a clean-image estimate through a fixed
//! preconditioning built from per-label data statistics (mean image `mu`,
//! spread `sd`). With `y = x_t / sqrt(ab_t)` and `sigma^2 = (1 - ab_t) / ab_t`:
//!
//! ```text
//! D(x_t) = mu + c_skip * (y - mu) + c_out * F(c_in * (y - mu), sigma, label)
//! c_skip = sd^2 / (sigma^2 + sd^2), c_out = sigma * sd / sqrt(sigma^2 + sd^2)
//! c_in = 1 / sqrt(sigma^2 + sd^2)
//! ```
//!
//! and returns the matching noise `(x_t - sqrt(ab_t) * D) / sqrt(1 - ab_t)`.
//! With `F = 0` this is the exact denoiser for an isotropic Gaussian around
//! `mu`, so an untrained model is already a sane prior and a single-image
//! training set reduces to the point-mass oracle.

use super::{ConditionRef, Embedding, NoisePredictor};
use crate::autograd::{Graph, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{self, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::sparse::SparseMap;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Feature channels of the residual network.
    pub width: usize,
    /// Probability of dropping the label during training, which teaches the
    /// unconditional mode used by classifier-free guidance.
    pub uncond_prob: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            width: 16,
            uncond_prob: 0.1,
            seed: 0,
        }
    }
}

/// Everything needed to rebuild a trained [`ToyPredictor`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPredictorWeights {
    pub latent_shape: Vec<usize>,
    pub labels: Vec<String>,
    /// One mean image per label, then the unconditional mean.
    pub means: Vec<Tensor>,
    pub sigma_data: Vec<f64>,
    pub width: usize,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    pub final_loss: f64,
    pub train_steps: usize,
}

#[derive(Clone, Debug)]
pub struct ToyPredictor {
    weights: ToyPredictorWeights,
    sched: Arc<NoiseSchedule>,
}

fn init_params(channels: usize, labels: usize, width: usize, seed: u64) -> ParamSet {
    let cin = channels + 1 + labels;
    let layers = [
        (width, cin, 3, 1.0),
        (width, width, 3, 1.0),
        (width, width, 3, 1.0),
        (width, width, 3, 1.0),
        (width, width, 3, 1.0),
        (width, width, 3, 1.0),
        (width, width, 1, 1.0),
        (width, width, 3, 1.0),
        (channels, width, 3, 0.0),
    ];
    let tensors = layers
        .iter()
        .enumerate()
        .flat_map(|(i, &(co, ci, k, gain))| nn::conv_params(co, ci, k, gain, rng::derive(seed, i as u64)))
        .collect();
    ParamSet { tensors }
}

/// Trains a toy predictor on `(image, label)` pairs with the standard
/// epsilon-prediction loss. `labels` names the label indices.
pub fn make_toy_predictor(
    train_set: &[(Tensor, usize)],
    labels: &[&str],
    sched: Arc<NoiseSchedule>,
    cfg: &ToyTrainConfig,
) -> Result<ToyPredictor> {
    let Some((first, _)) = train_set.first() else {
        return Err(Error::InvalidParameter("toy predictor needs a non-empty training set".into()));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::InvalidParameter(format!("expected [C, H, W] images, got {shape:?}")));
    }
    for (img, label) in train_set {
        ensure_shape(&shape, img.shape())?;
        if *label >= labels.len().max(1) {
            return Err(Error::InvalidParameter(format!("label {label} has no name")));
        }
    }
    let n_labels = labels.len().max(1);
    let stats = |members: Vec<&Tensor>| -> (Tensor, f64) {
        let n = members.len() as f64;
        let mut mean = Tensor::zeros(&shape);
        for m in &members {
            for (a, b) in mean.data_mut().iter_mut().zip(m.data()) {
                *a += b / n;
            }
        }
        let var = members
            .iter()
            .map(|m| m.data().iter().zip(mean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n * mean.len() as f64);
        (mean, var.sqrt())
    };
    let (uncond_mean, uncond_sd) = stats(train_set.iter().map(|(t, _)| t).collect());
    let mut means = Vec::with_capacity(n_labels + 1);
    let mut sigma_data = Vec::with_capacity(n_labels + 1);
    for l in 0..n_labels {
        let members: Vec<&Tensor> = train_set.iter().filter(|(_, lb)| *lb == l).map(|(t, _)| t).collect();
        let (m, s) = if members.is_empty() {
            (uncond_mean.clone(), uncond_sd)
        } else {
            stats(members)
        };
        means.push(m);
        sigma_data.push(s);
    }
    means.push(uncond_mean);
    sigma_data.push(uncond_sd);

    let mut model = ToyPredictor {
        weights: ToyPredictorWeights {
            latent_shape: shape.clone(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            means,
            sigma_data,
            width: cfg.width,
            params: init_params(shape[0], n_labels, cfg.width, rng::derive_named(cfg.seed, "init")),
            schedule: (*sched).clone(),
            final_loss: f64::NAN,
            train_steps: 0,
        },
        sched,
    };
    model.train(train_set, cfg)?;
    Ok(model)
}

impl ToyPredictor {
    pub fn from_weights(weights: ToyPredictorWeights) -> Self {
        let sched = Arc::new(weights.schedule.clone());
        Self { weights, sched }
    }

    pub fn weights(&self) -> &ToyPredictorWeights {
        &self.weights
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.sched
    }

    /// Training loss of the last optimization step.
    pub fn final_loss(&self) -> f64 {
        self.weights.final_loss
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.weights)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_weights(serde_json::from_slice(&bytes)?))
    }

    fn train(&mut self, train_set: &[(Tensor, usize)], cfg: &ToyTrainConfig) -> Result<()> {
        let n_labels = self.weights.labels.len().max(1);
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &self.weights.params.tensors,
        );
        let mut r = rng::rng(rng::derive_named(cfg.seed, "train"));
        let shape = self.weights.latent_shape.clone();
        for step in 0..cfg.steps {
            let mut g = Graph::new();
            let params = self.weights.params.bind(&mut g, true);
            let mut losses = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (img, label) = &train_set[r.random_range(0..train_set.len())];
                let slot = if r.random_bool(cfg.uncond_prob) { n_labels } else { *label };
                let t = r.random_range(1..=self.sched.steps());
                let z = rng::gaussian(&shape, r.random());
                let ab = self.sched.alpha_bar(t);
                let x_t = img.zip_map(&z, |x, n| ab.sqrt() * x + (1.0 - ab).sqrt() * n)?;
                let x = g.constant(x_t);
                let eps = self.forward(&mut g, &params, x, t, slot)?;
                let target = g.constant(z);
                let diff = g.sub(eps, target)?;
                let sq = g.square(diff);
                losses.push(g.mean(sq));
            }
            let total = g.concat(&losses)?;
            let loss = g.mean(total);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "toy predictor training diverged at step {step} (loss {value}, lr {})",
                    cfg.lr
                )));
            }
            let grads = g.backward(loss);
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.get_or_zeros(p)).collect();
            adam.step(&mut self.weights.params.tensors, &grads);
            self.weights.final_loss = value;
            self.weights.train_steps += 1;
        }
        Ok(())
    }

    fn slot(&self, condition: &ConditionRef) -> Result<usize> {
        let n_labels = self.weights.labels.len().max(1);
        match &condition.embedding {
            Embedding::Unconditional => Ok(n_labels),
            Embedding::Label(l) if *l < n_labels => Ok(*l),
            Embedding::Label(l) => Err(Error::InvalidParameter(format!("unknown label {l}"))),
            Embedding::Vector(_) => Err(Error::UnsupportedCapability(
                "toy predictor only understands label conditions".into(),
            )),
        }
    }

    /// `(sigma, c_in, c_skip, c_out)` at step `t` for label slot `slot`.
    fn precondition(&self, t: usize, slot: usize) -> (f64, f64, f64, f64) {
        let ab = self.sched.alpha_bar(t);
        let sigma = ((1.0 - ab) / ab).sqrt();
        let sd = self.weights.sigma_data[slot];
        let denom = sigma * sigma + sd * sd;
        (sigma, 1.0 / denom.sqrt(), sd * sd / denom, sigma * sd / denom.sqrt())
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x_t: Var, t: usize, slot: usize) -> Result<Var> {
        let ab = self.sched.alpha_bar(t);
        let (_, _, c_skip, c_out) = self.precondition(t, slot);
        let y = g.scale(x_t, 1.0 / ab.sqrt());
        let mu = g.constant(self.weights.means[slot].clone());
        let d = g.sub(y, mu)?;
        let f = self.network(g, p, d, t, slot)?;
        let delta = g.axpby(c_skip, d, c_out, f)?;
        let denoised = g.add(delta, mu)?;
        let inv = 1.0 / (1.0 - ab).sqrt();
        g.axpby(inv, x_t, -ab.sqrt() * inv, denoised)
    }

    /// The trainable residual `F` given the centered input `d = y - mu`.
    fn network(&self, g: &mut Graph, p: &[Var], d: Var, t: usize, slot: usize) -> Result<Var> {
        let w = &self.weights;
        let n_labels = w.labels.len().max(1);
        let (_, h, wd) = (w.latent_shape[0], w.latent_shape[1], w.latent_shape[2]);
        let (sigma, c_in, _, _) = self.precondition(t, slot);
        let dn = g.scale(d, c_in);
        let mut plane_vals = vec![sigma.ln() / 4.0];
        plane_vals.extend((0..n_labels).map(|l| if l == slot { 1.0 } else { 0.0 }));
        let extra = g.constant(nn::planes(&plane_vals, h, wd));
        let inp = g.concat(&[dn, extra])?;

        let block = |g: &mut Graph, x: Var, l: usize| -> Result<Var> {
            let c = nn::conv(g, x, p[2 * l], p[2 * l + 1], 1)?;
            Ok(g.silu(c))
        };
        let a0 = block(g, inp, 0)?;
        let a1 = block(g, a0, 1)?;
        // two pooled levels and a global context vector when the size allows
        let mid = if h % 4 == 0 && wd % 4 == 0 {
            let d1 = g.avg_pool2(a1)?;
            let b1 = block(g, d1, 2)?;
            let d2 = g.avg_pool2(b1)?;
            let b2 = block(g, d2, 3)?;
            let b2 = block(g, b2, 4)?;
            let u2 = g.upsample2(b2)?;
            let s1 = g.add(u2, b1)?;
            let b3 = block(g, s1, 5)?;
            let u1 = g.upsample2(b3)?;
            let ctx = global_context(g, b2, w.width)?;
            let ctx = block(g, ctx, 6)?;
            let ctx = broadcast(g, ctx, w.width, h, wd)?;
            let s0 = g.add(u1, a1)?;
            g.add(s0, ctx)?
        } else {
            a1
        };
        let a4 = block(g, mid, 7)?;
        nn::conv(g, a4, p[16], p[17], 1)
    }
}

/// Spatial mean of every channel, as a `[c, 1, 1]` map.
fn global_context(g: &mut Graph, x: Var, c: usize) -> Result<Var> {
    let n: usize = g.shape(x)[1..].iter().product();
    let map = SparseMap::from_rows(c, c * n, |ch, push| {
        for i in 0..n {
            push(ch * n + i, 1.0 / n as f64);
        }
    });
    g.linear_map(x, Rc::new(map), &[c, 1, 1])
}

/// Repeats a `[c, 1, 1]` map over `h x w`.
fn broadcast(g: &mut Graph, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let map = SparseMap::from_rows(c * h * w, c, |i, push| push(i / (h * w), 1.0));
    g.linear_map(x, Rc::new(map), &[c, h, w])
}

impl NoisePredictor for ToyPredictor {
    fn latent_shape(&self) -> &[usize] {
        &self.weights.latent_shape
    }

    fn supports_unconditional(&self) -> bool {
        true
    }

    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, condition: &ConditionRef) -> Result<Var> {
        if t == 0 || t > self.sched.steps() {
            return Err(Error::TimeOutOfRange {
                t,
                min: 1,
                max: self.sched.steps(),
            });
        }
        ensure_shape(&self.weights.latent_shape, g.shape(x_t))?;
        let slot = self.slot(condition)?;
        let params = self.weights.params.bind(g, false);
        self.forward(g, &params, x_t, t, slot)
    }

    fn condition(&self, prompt: &str) -> Result<ConditionRef> {
        if prompt.is_empty() {
            return Ok(ConditionRef::unconditional());
        }
        self.weights
            .labels
            .iter()
            .position(|l| l == prompt)
            .map(|i| ConditionRef::label(prompt, i))
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "prompt {prompt:?} is not one of the toy labels {:?}",
                    self.weights.labels
                ))
            })
    }
}

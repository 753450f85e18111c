//! Ablation sweeps over the APS noise level, step size and guidance weight.

use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::eval::{embedding_similarity, evaluate_map, Embedder, EvalConfig, ReferencedDetector};
use crate::generator::ConditionRef;
use crate::objective::AttackStack;
use crate::optimizer::{init_patch, optimize_patch, resample_patch, CheckpointSink, OptimizeConfig};
use crate::render::SceneSample;
use std::path::Path;

/// The axes of a sweep. Every combination is one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub t_starts: Vec<usize>,
    pub steps: Vec<usize>,
    pub cfg_weights: Vec<f64>,
}

impl SweepSpec {
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &t in &self.t_starts {
            for &s in &self.steps {
                for &w in &self.cfg_weights {
                    out.push((t, s, w));
                }
            }
        }
        out
    }

    /// The axis with more than one value, preferring `t_start`, then `s`,
    /// then `cfg_w`.
    pub fn swept_axis(&self) -> Axis {
        if self.t_starts.len() > 1 || (self.steps.len() <= 1 && self.cfg_weights.len() <= 1) {
            Axis::TStart
        } else if self.steps.len() > 1 {
            Axis::Step
        } else {
            Axis::CfgWeight
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    TStart,
    Step,
    CfgWeight,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::TStart => "t_start",
            Axis::Step => "s",
            Axis::CfgWeight => "cfg_w",
        }
    }

    pub fn value(self, row: &SweepRow) -> f64 {
        match self {
            Axis::TStart => row.t_start as f64,
            Axis::Step => row.s as f64,
            Axis::CfgWeight => row.cfg_w,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t_start: usize,
    pub s: usize,
    pub cfg_w: f64,
    pub map_percent: Option<f64>,
    pub clip_sim: Option<f64>,
    /// `ok`, or the reason the cell failed.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub spec: SweepSpec,
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "t_start,s,cfg_w,mAP,clip_sim,status";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            // commas and newlines would break the row
            let status: String = r.status.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t_start,
                r.s,
                r.cfg_w,
                opt(r.map_percent),
                opt(r.clip_sim),
                status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Parse(format!("sweep CSV must start with `{CSV_HEADER}`")));
        }
        let mut spec = SweepSpec {
            t_starts: vec![],
            steps: vec![],
            cfg_weights: vec![],
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.splitn(6, ',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("sweep row {}: expected 6 fields", i + 1)));
            }
            let bad = |what: &str| Error::Parse(format!("sweep row {}: bad {what}", i + 1));
            let num = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(what))
                }
            };
            let row = SweepRow {
                t_start: f[0].parse().map_err(|_| bad("t_start"))?,
                s: f[1].parse().map_err(|_| bad("s"))?,
                cfg_w: f[2].parse().map_err(|_| bad("cfg_w"))?,
                map_percent: num(f[3], "mAP")?,
                clip_sim: num(f[4], "clip_sim")?,
                status: f[5].to_string(),
            };
            push_unique(&mut spec.t_starts, row.t_start);
            push_unique(&mut spec.steps, row.s);
            push_unique(&mut spec.cfg_weights, row.cfg_w);
            rows.push(row);
        }
        Ok(Self { spec, rows })
    }
}

/// What a sweep cell needs besides its own sampler settings.
pub struct SweepContext<'a> {
    pub stack: &'a AttackStack<'a>,
    pub condition: &'a ConditionRef,
    /// Optimization settings shared by all cells; the sampler fields are
    /// overridden per cell.
    pub optimize: &'a OptimizeConfig,
    pub train: &'a [SceneSample],
    pub eval_corpus: &'a [SceneSample],
    pub detectors: &'a [ReferencedDetector<'a>],
    pub eval: &'a EvalConfig,
    pub embedder: &'a dyn Embedder,
    pub dataset_id: &'a str,
}

fn run_cell(ctx: &SweepContext<'_>, t_start: usize, s: usize, w: f64) -> Result<(f64, f64)> {
    let sched = ctx.stack.schedule;
    let sampler = SamplerConfig {
        t_start,
        step: s,
        cfg_weight: w,
        ..ctx.optimize.sampler.clone()
    };
    let init_cfg = SamplerConfig {
        t_start: sched.steps(),
        ..sampler.clone()
    };
    let init = init_patch(&init_cfg, ctx.condition, ctx.stack.predictor, sched)?;
    let p_init = ctx.stack.codec.decode(&init.value)?;
    let cfg = OptimizeConfig {
        sampler,
        ..ctx.optimize.clone()
    };
    let (best, _) = optimize_patch(&init, ctx.train, &cfg, ctx.stack, &CheckpointSink::default())?;
    let p_final = resample_patch(&best, &cfg.validation_sampler(), ctx.stack)?;
    if ctx.detectors.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one detector".into()));
    }
    let mut total = 0.0;
    for d in ctx.detectors {
        total += evaluate_map(d.detector, ctx.dataset_id, ctx.eval_corpus, &d.reference, Some(&p_final), ctx.eval)?.map_percent;
    }
    let sim = embedding_similarity(&p_init, &p_final, ctx.embedder)?;
    Ok((total / ctx.detectors.len() as f64, sim))
}

/// One short optimization per grid cell, recording the final mAP (mean over
/// detectors) and the similarity between the initial and final patch. A
/// failing cell keeps its row with the error as status.
pub fn sweep_noise_step(spec: &SweepSpec, ctx: &SweepContext<'_>) -> SweepGrid {
    let rows = spec
        .cells()
        .into_iter()
        .map(|(t_start, s, cfg_w)| {
            let (map_percent, clip_sim, status) = match run_cell(ctx, t_start, s, cfg_w) {
                Ok((m, c)) => (Some(m), Some(c), "ok".to_string()),
                Err(e) => {
                    log::warn!("sweep cell t_start={t_start} s={s} w={cfg_w} failed: {e}");
                    (None, None, format!("error: {e}"))
                }
            };
            log::info!("sweep cell t_start={t_start} s={s} w={cfg_w}: mAP {map_percent:?} sim {clip_sim:?}");
            SweepRow {
                t_start,
                s,
                cfg_w,
                map_percent,
                clip_sim,
                status,
            }
        })
        .collect();
    SweepGrid {
        spec: spec.clone(),
        rows,
    }
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: f64 = 32.0;
const MAP_COLOR: [u8; 3] = [200, 40, 40];
const SIM_COLOR: [u8; 3] = [40, 80, 200];

/// Dual-axis line plot against the swept axis: mAP in red on a 0-100 left
/// axis, similarity in blue on a -1..1 right axis. Failed cells are
/// skipped.
pub fn plot_png(grid: &SweepGrid, path: &Path) -> Result<()> {
    let axis = grid.spec.swept_axis();
    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let (w, h) = (PLOT_W as f64, PLOT_H as f64);
    let xs: Vec<f64> = grid.rows.iter().map(|r| axis.value(r)).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| MARGIN + (x - lo) / span * (w - 2.0 * MARGIN);
    let py = |frac: f64| h - MARGIN - frac.clamp(0.0, 1.0) * (h - 2.0 * MARGIN);

    let grey = [90, 90, 90];
    line(&mut img, (MARGIN, py(0.0)), (w - MARGIN, py(0.0)), grey);
    line(&mut img, (MARGIN, py(0.0)), (MARGIN, py(1.0)), MAP_COLOR);
    line(&mut img, (w - MARGIN, py(0.0)), (w - MARGIN, py(1.0)), SIM_COLOR);
    for k in 0..=4 {
        let y = py(k as f64 / 4.0);
        line(&mut img, (MARGIN - 4.0, y), (MARGIN, y), MAP_COLOR);
        line(&mut img, (w - MARGIN, y), (w - MARGIN + 4.0, y), SIM_COLOR);
    }
    for &x in &xs {
        line(&mut img, (px(x), py(0.0)), (px(x), py(0.0) + 4.0), grey);
    }

    let mut order: Vec<usize> = (0..grid.rows.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let series = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Vec<(f64, f64)> {
        order.iter().filter_map(|&i| f(&grid.rows[i]).map(|v| (px(xs[i]), py(v)))).collect()
    };
    let map = series(&|r| r.map_percent.map(|m| m / 100.0));
    let sim = series(&|r| r.clip_sim.map(|c| (c + 1.0) / 2.0));
    for (pts, color) in [(map, MAP_COLOR), (sim, SIM_COLOR)] {
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(&mut img, x + dx as f64, y + dy as f64, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn put(img: &mut image::RgbImage, x: f64, y: f64, c: [u8; 3]) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let u = k as f64 / n as f64;
        put(img, a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1), c);
    }
}

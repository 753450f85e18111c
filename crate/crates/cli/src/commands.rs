use crate::assets;
use patchsmith::config::RunConfig;
use patchsmith::detector::{Detector, ToyDetector};
use patchsmith::diffusion::{LatentState, SamplerConfig};
use patchsmith::eval::{
    cross_model_matrix, evaluate_map, label_with_detector, EvalReport, RandomProjectionEmbedder, ReferencedDetector,
};
use patchsmith::generator::BoundGenerator;
use patchsmith::objective::AttackStack;
use patchsmith::optimizer::{init_patch, optimize_patch, resample_patch, write_attack_outputs, CheckpointSink};
use patchsmith::sweep::{plot_png, sweep_noise_step, SweepContext};
use patchsmith::{io, rng, synth, Error, Result, Tensor};
use std::path::{Path, PathBuf};

/// Creates the output directory and echoes the resolved config into it.
fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.resolved"), cfg.to_document())?;
    log::info!("writing to {}", out.display());
    Ok(out)
}

/// The initial patch latent for `sampler`'s guidance weight and seed.
fn init_latent(cfg: &RunConfig, gen: &BoundGenerator, sampler: &SamplerConfig) -> Result<LatentState> {
    let condition = gen.predictor.condition(cfg.prompt())?;
    let init_cfg = SamplerConfig {
        t_start: gen.schedule.steps(),
        ..sampler.clone()
    };
    init_patch(&init_cfg, &condition, gen.predictor.as_ref(), &gen.schedule).map_err(|e| e.in_stage("generate"))
}

fn write_init(out: &Path, gen: &BoundGenerator, init: &LatentState) -> Result<Tensor> {
    let pixels = gen.codec.decode(&init.value)?;
    io::write_png(&out.join("patch_init.png"), &pixels)?;
    io::write_tensor(&out.join("latent_init.json"), &init.value)?;
    Ok(pixels)
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let gen = assets::generator(cfg)?;
    let out = prepare(cfg)?;
    let init = init_latent(cfg, &gen, &cfg.sampler()?)?;
    write_init(&out, &gen, &init)?;
    Ok(())
}

fn stack<'a>(cfg: &RunConfig, gen: &'a BoundGenerator, detectors: &'a [ToyDetector]) -> Result<AttackStack<'a>> {
    let mut stack = AttackStack::new(
        gen.predictor.as_ref(),
        gen.codec.as_ref(),
        &gen.schedule,
        detectors.iter().map(|d| d as &dyn Detector).collect(),
    );
    stack.ranges = cfg.ranges()?;
    stack.placement = cfg.placement()?;
    Ok(stack)
}

pub fn attack(cfg: &RunConfig) -> Result<()> {
    let gen = assets::generator(cfg)?;
    let detectors = assets::detectors(cfg)?;
    let (_, scenes) = assets::train_corpus(cfg)?;
    let scenes = label_with_detector(&detectors[0], &scenes, &cfg.eval()?)?;
    let out = prepare(cfg)?;
    let opt = cfg.optimize()?;
    let init = init_latent(cfg, &gen, &opt.sampler)?;
    let p_init = write_init(&out, &gen, &init)?;
    let stack = stack(cfg, &gen, &detectors)?;
    let sink = CheckpointSink {
        dir: Some(out.join("checkpoints")),
    };
    let (best, trace) = optimize_patch(&init, &scenes, &opt, &stack, &sink)?;
    // with no iterations run the initial patch is the result
    let p_final = if trace.is_empty() {
        p_init
    } else {
        resample_patch(&best, &opt.validation_sampler(), &stack)?
    };
    write_attack_outputs(&out, &best, &trace, &p_final)?;
    log::info!("{} iterations, best checkpoint {:?}", trace.len(), trace.best.and_then(|b| trace.checkpoints.get(b)));
    Ok(())
}

fn patch_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn read_patch(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingAsset {
            entry: "eval.patches".into(),
            path: path.to_path_buf(),
        });
    }
    io::read_png(path)
}

pub fn eval(cfg: &RunConfig, matrix: bool) -> Result<()> {
    let detectors = assets::detectors(cfg)?;
    let (dataset_id, corpus) = assets::test_corpus(cfg)?;
    let eval = cfg.eval()?;
    let out = prepare(cfg)?;
    let references = assets::references(cfg, &detectors, &corpus, &eval, &out)?;

    let mut patches: Vec<(String, Option<Tensor>)> = vec![("clean".into(), None)];
    for path in cfg.eval_patches() {
        patches.push((patch_name(&path), Some(read_patch(&path)?)));
    }
    let mut csv = format!("patch,{}\n", EvalReport::CSV_HEADER);
    for (name, patch) in &patches {
        for (d, r) in detectors.iter().zip(&references) {
            let report = evaluate_map(d, &dataset_id, &corpus, r, patch.as_ref(), &eval)?;
            log::info!("{name} vs {}: mAP {:.2}", report.detector_id, report.map_percent);
            csv.push_str(&format!("{name},{}\n", report.csv_row()));
        }
    }
    std::fs::write(out.join("eval.csv"), csv)?;

    if matrix {
        let gen = assets::generator(cfg)?;
        let sampler = cfg.sampler()?;
        let init = init_latent(cfg, &gen, &sampler)?;
        let shape = gen.codec.pixel_shape().to_vec();
        let noise = synth::noise_patch(&shape, rng::derive_named(cfg.seed()?, "noise-patch"));
        let mut rows = vec![
            ("Random Noise".to_string(), Some(noise)),
            ("Unoptimized Patch".to_string(), Some(gen.codec.decode(&init.value)?)),
        ];
        rows.extend(patches.into_iter().skip(1));
        let referenced: Vec<ReferencedDetector> = detectors
            .iter()
            .zip(references)
            .map(|(d, reference)| ReferencedDetector {
                detector: d,
                reference,
            })
            .collect();
        let m = cross_model_matrix(&rows, &referenced, &dataset_id, &corpus, &eval);
        for (name, row) in m.patches.iter().zip(&m.cells) {
            for cell in row.iter().filter_map(|c| c.as_ref().err()) {
                log::warn!("matrix cell for {name} failed: {cell}");
            }
        }
        std::fs::write(out.join("matrix.csv"), m.to_csv())?;
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.sweep()?;
    let gen = assets::generator(cfg)?;
    let detectors = assets::detectors(cfg)?;
    let eval = cfg.eval()?;
    let (_, train) = assets::train_corpus(cfg)?;
    let train = label_with_detector(&detectors[0], &train, &eval)?;
    let (dataset_id, corpus) = assets::test_corpus(cfg)?;
    let out = prepare(cfg)?;
    let references = assets::references(cfg, &detectors, &corpus, &eval, &out)?;
    let referenced: Vec<ReferencedDetector> = detectors
        .iter()
        .zip(references)
        .map(|(d, reference)| ReferencedDetector {
            detector: d,
            reference,
        })
        .collect();
    let stack = stack(cfg, &gen, &detectors)?;
    let condition = gen.predictor.condition(cfg.prompt())?;
    let mut optimize = cfg.optimize()?;
    optimize.max_iterations = cfg.sweep_iterations()?;
    let embedder = RandomProjectionEmbedder::default();
    let ctx = SweepContext {
        stack: &stack,
        condition: &condition,
        optimize: &optimize,
        train: &train,
        eval_corpus: &corpus,
        detectors: &referenced,
        eval: &eval,
        embedder: &embedder,
        dataset_id: &dataset_id,
    };
    let grid = sweep_noise_step(&spec, &ctx);
    std::fs::write(out.join("sweep.csv"), grid.to_csv())?;
    if let Err(e) = plot_png(&grid, &out.join("sweep.png")) {
        log::warn!("sweep plot not written: {e}");
    }
    Ok(())
}

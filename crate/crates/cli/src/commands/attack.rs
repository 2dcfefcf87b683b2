use std::time::Instant;

use ifgmi_core::attack::{
    baseline_latent_inversion, baseline_pixel_inversion, run_attack, AttackConfig, AttackRun, ConstraintAudit,
};
use ifgmi_core::models::{Classifier, Discriminator, Generator, Variant};
use ifgmi_core::{image, seed, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Method;
use crate::error::{CliError, Result};
use crate::layout::{save_labeled, write_json};
use crate::Context;

/// Columns of every emitted image grid.
pub const GRID_COLS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub class: usize,
    pub candidate: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    /// Mean identity loss before optimisation (IF-GMI) or at step 0.
    pub initial_loss: f64,
    /// Mean identity loss at the end of each stage.
    pub stage_losses: Vec<f64>,
    /// How many final images came from each stage.
    pub chosen_stage_counts: Vec<usize>,
}

/// `result.json` of one method run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub label: String,
    pub repeat: usize,
    pub seed: u64,
    pub config_hash: String,
    pub attack: Option<AttackConfig>,
    pub classes: Vec<usize>,
    pub images: usize,
    pub failed: usize,
    pub failures: Vec<CandidateFailure>,
    pub audit: Option<ConstraintAudit>,
    pub per_class: Vec<ClassSummary>,
    pub seconds: f64,
}

/// Seed of attack repetition `repeat`; shared by all methods so runs pair up.
pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    seed::derive_indexed(master, "attack", repeat as u64)
}

pub struct Models {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub target: Classifier<f32>,
    pub classes: Vec<usize>,
}

/// Loads the prior and the target model, checking both exist up front and
/// that the target is usable and agrees with the configured classes.
pub fn load_models(ctx: &Context) -> Result<Models> {
    ctx.layout.require_models(&["prior", "target"])?;
    let (target, side) = ctx.layout.load_classifier(Variant::Target)?;
    if !side.report.usable {
        return Err(CliError::config(format!(
            "target classifier test accuracy {:.3} is below the usable bar",
            side.report.test_accuracy
        )));
    }
    let classes = ctx.cfg.target_classes();
    if let Some(bad) = classes.iter().find(|&&c| c >= side.classes) {
        return Err(CliError::config(format!("class {bad} outside the target's {} classes", side.classes)));
    }
    let (generator, discriminator, _) = ctx.layout.load_prior()?;
    Ok(Models { generator, discriminator, target, classes })
}

pub fn run(ctx: &Context) -> Result<Value> {
    let models = load_models(ctx)?;
    let mut runs = Vec::new();
    for method in &ctx.cfg.methods {
        for repeat in 0..ctx.cfg.repeats {
            let result = run_method(ctx, &models, *method, repeat)?;
            runs.push(json!({
                "label": result.label,
                "repeat": repeat,
                "images": result.images,
                "failed": result.failed,
                "violations": result.audit.as_ref().map(|a| a.violations()),
                "seconds": result.seconds,
            }));
        }
    }
    Ok(json!({ "command": "attack", "config_hash": ctx.config_hash, "runs": runs }))
}

pub fn run_method(ctx: &Context, models: &Models, method: Method, repeat: usize) -> Result<MethodResult> {
    let label = method.label();
    let dir = ctx.layout.attack_run(&label, repeat);
    ctx.layout.create(&dir)?;
    let seed = repeat_seed(ctx.seed, repeat);
    let started = Instant::now();
    let (images, labels, mut result) = match method {
        Method::Ifgmi { depth } => {
            let cfg = ctx.cfg.attack_for_depth(depth)?;
            let run = run_attack(&models.generator, &models.target, &models.classes, &cfg, seed)?;
            let snaps = dir.join("snapshots");
            ctx.layout.create(&snaps)?;
            for stage in 0..=depth {
                let (x, _) = run.stage_images(stage)?;
                image::write_grid(snaps.join(format!("stage_{stage}.ppm")), &x, GRID_COLS)?;
            }
            let (x, y) = run.final_images()?;
            (x, y, ifgmi_result(&run, cfg))
        }
        Method::Latent | Method::Pixel => baseline(ctx, models, method, seed)?,
    };
    save_labeled(&dir.join("final.ifgt"), &images, &labels)?;
    image::write_grid(dir.join("final.ppm"), &images, GRID_COLS)?;
    result.method = method;
    result.label = label;
    result.repeat = repeat;
    result.seed = seed;
    result.config_hash = ctx.config_hash.clone();
    result.seconds = started.elapsed().as_secs_f64();
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ifgmi_result(run: &AttackRun, cfg: AttackConfig) -> MethodResult {
    let mut failures = Vec::new();
    let mut per_class = Vec::new();
    for c in &run.classes {
        for (j, f) in c.failed.iter().enumerate() {
            if let Some(msg) = f {
                failures.push(CandidateFailure { class: c.class, candidate: j, message: msg.clone() });
            }
        }
        let mut counts = vec![0; c.snapshots.len()];
        for j in c.live() {
            counts[c.chosen_stage[j]] += 1;
        }
        per_class.push(ClassSummary {
            class: c.class,
            initial_loss: mean(&c.initial_losses),
            stage_losses: c.stage_losses.iter().map(|l| mean(l)).collect(),
            chosen_stage_counts: counts,
        });
    }
    MethodResult {
        method: Method::Ifgmi { depth: cfg.depth() },
        label: String::new(),
        repeat: 0,
        seed: 0,
        config_hash: String::new(),
        classes: run.classes.iter().map(|c| c.class).collect(),
        images: run.classes.iter().map(|c| c.live().len()).sum(),
        failed: failures.len(),
        failures,
        audit: Some(run.audit.clone()),
        per_class,
        seconds: 0.0,
        attack: Some(cfg),
    }
}

fn baseline(ctx: &Context, models: &Models, method: Method, seed: u64) -> Result<(Tensor<f32>, Vec<usize>, MethodResult)> {
    let cfg = &ctx.cfg;
    let count = cfg.attack.select;
    let mut batches = Vec::new();
    let mut labels = Vec::new();
    let mut per_class = Vec::new();
    for &class in &models.classes {
        let class_seed = seed::derive_indexed(seed, &format!("{}-class", method.label()), class as u64);
        let r = match method {
            Method::Pixel => baseline_pixel_inversion(
                &models.target,
                class,
                count,
                cfg.baselines.pixel_steps,
                &cfg.attack.adam,
                class_seed,
            )?,
            _ => baseline_latent_inversion(
                &models.generator,
                (cfg.attack.lambda > 0.0).then_some(&models.discriminator),
                &models.target,
                class,
                count,
                cfg.baselines.latent_steps,
                cfg.attack.lambda,
                &cfg.attack.adam,
                class_seed,
            )?,
        };
        per_class.push(ClassSummary {
            class,
            initial_loss: r.losses.first().copied().unwrap_or(f64::NAN),
            stage_losses: r.losses.last().copied().into_iter().collect(),
            chosen_stage_counts: vec![count],
        });
        labels.extend(std::iter::repeat_n(class, count));
        batches.push(r.images);
    }
    let refs: Vec<&Tensor<f32>> = batches.iter().collect();
    let images = Tensor::stack_rows(&refs)?;
    let result = MethodResult {
        method,
        label: String::new(),
        repeat: 0,
        seed: 0,
        config_hash: String::new(),
        attack: None,
        classes: models.classes.clone(),
        images: labels.len(),
        failed: 0,
        failures: Vec::new(),
        audit: None,
        per_class,
        seconds: 0.0,
    };
    Ok((images, labels, result))
}

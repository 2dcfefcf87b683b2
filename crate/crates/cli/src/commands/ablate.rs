use std::fmt::Write as _;
use std::time::Instant;

use ifgmi_core::attack::{run_attack, AttackConfig, AttackRun};
use ifgmi_core::metrics;
use ifgmi_core::models::SynthesisStack;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::attack::{load_models, repeat_seed, Models};
use super::evaluate::Scorer;
use crate::error::{CliError, Result};
use crate::layout::{write_json, write_text};
use crate::Context;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Number of intermediate stages, from one deep run restricted to each prefix.
    L,
    /// Scale factor on the per-stage radii.
    Radii,
    /// Single split point at depth one.
    Decomposition,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "depth" => Ok(Axis::L),
            "radii" => Ok(Axis::Radii),
            "decomposition" => Ok(Axis::Decomposition),
            other => Err(CliError::config(format!("unknown ablation axis `{other}` (L, radii, decomposition)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::L => "L",
            Axis::Radii => "radii",
            Axis::Decomposition => "decomposition",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub repeat: usize,
    pub seed: u64,
    pub images: usize,
    pub failed: usize,
    pub violations: u64,
    /// Evaluation-model accuracies.
    pub acc1: f64,
    pub acc5: f64,
    pub target_acc1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub mean_acc1: f64,
    pub std_acc1: f64,
    pub mean_acc5: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub table: Vec<AblationPoint>,
    /// Axis value with the highest mean Acc@1 (first on ties).
    pub best: f64,
    pub seconds: f64,
}

fn score(scorer: &Scorer, models: &Models, run: &AttackRun, value: f64, repeat: usize, seed: u64) -> Result<AblationRow> {
    let (x, y) = run.final_images()?;
    let (acc1, acc5) = scorer.accuracy(&x, &y)?;
    let target_acc1 = metrics::acc_at_k(&models.target.logits(&x)?, &y, 1)?;
    Ok(AblationRow {
        value,
        repeat,
        seed,
        images: y.len(),
        failed: run.failed_count(),
        violations: run.audit.violations(),
        acc1,
        acc5,
        target_acc1,
    })
}

/// The attack configurations swept on `axis`, with their axis values.
fn sweep(ctx: &Context, axis: Axis) -> Result<Vec<(f64, AttackConfig)>> {
    let base = &ctx.cfg.attack;
    Ok(match axis {
        Axis::L => vec![(base.depth() as f64, base.clone())],
        Axis::Radii => ctx
            .cfg
            .ablation
            .radii_scales
            .iter()
            .map(|&s| (s, AttackConfig { radii: base.radii.iter().map(|r| r * s).collect(), ..base.clone() }))
            .collect(),
        Axis::Decomposition => {
            let mut out = Vec::new();
            for split in 1..=SynthesisStack::<f32>::SPLIT_POINTS {
                let mut cfg = ctx.cfg.attack_for_depth(1)?;
                cfg.splits = vec![split];
                cfg.validate()?;
                out.push((split as f64, cfg));
            }
            out
        }
    })
}

fn table(rows: &[AblationRow]) -> Vec<AblationPoint> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.value == value).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.acc1).sum::<f64>() / n;
            let var = sel.iter().map(|r| (r.acc1 - mean).powi(2)).sum::<f64>() / n;
            AblationPoint { value, mean_acc1: mean, std_acc1: var.sqrt(), mean_acc5: sel.iter().map(|r| r.acc5).sum::<f64>() / n }
        })
        .collect()
}

pub fn run(ctx: &Context, axis: &str) -> Result<Value> {
    let axis = Axis::parse(axis)?;
    let started = Instant::now();
    let models = load_models(ctx)?;
    let scorer = Scorer::load(ctx)?;
    let configs = sweep(ctx, axis)?;
    let mut rows = Vec::new();
    for repeat in 0..ctx.cfg.ablation.repeats {
        let seed = repeat_seed(ctx.seed, repeat);
        for (value, cfg) in &configs {
            let run = run_attack(&models.generator, &models.target, &models.classes, cfg, seed)?;
            if axis == Axis::L {
                // every shallower depth is a prefix of the deepest run
                for l in 0..=cfg.depth() {
                    rows.push(score(&scorer, &models, &run.restrict(l)?, l as f64, repeat, seed)?);
                }
            } else {
                rows.push(score(&scorer, &models, &run, *value, repeat, seed)?);
            }
        }
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.repeat.cmp(&b.repeat)));
    let points = table(&rows);
    let best = points.iter().fold(None::<&AblationPoint>, |acc, p| match acc {
        Some(b) if b.mean_acc1 >= p.mean_acc1 => Some(b),
        _ => Some(p),
    });
    let best = best.map(|p| p.value).unwrap_or(f64::NAN);
    let report = AblationReport {
        axis,
        config_hash: ctx.config_hash.clone(),
        seed: ctx.seed,
        rows,
        table: points,
        best,
        seconds: started.elapsed().as_secs_f64(),
    };

    let dir = ctx.layout.ablate();
    ctx.layout.create(&dir)?;
    let name = axis.name();
    let mut long = String::from("axis,value,repeat,seed,images,failed,violations,acc1,acc5,target_acc1\n");
    for r in &report.rows {
        let _ = writeln!(
            long,
            "{name},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.value, r.repeat, r.seed, r.images, r.failed, r.violations, r.acc1, r.acc5, r.target_acc1
        );
    }
    let mut plot = format!("{name},mean_acc1,std_acc1,mean_acc5\n");
    for p in &report.table {
        let _ = writeln!(plot, "{},{:.6},{:.6},{:.6}", p.value, p.mean_acc1, p.std_acc1, p.mean_acc5);
    }
    write_text(&dir.join(format!("{name}.csv")), &long)?;
    write_text(&dir.join(format!("{name}_table.csv")), &plot)?;
    write_json(&dir.join(format!("{name}.json")), &report)?;
    Ok(json!({ "command": "ablate", "axis": name, "config_hash": ctx.config_hash, "table": report.table, "best": best }))
}

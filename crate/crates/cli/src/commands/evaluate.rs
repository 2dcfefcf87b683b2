use std::fmt::Write as _;
use std::time::Instant;

use ifgmi_core::metrics::{self, MetricsReport};
use ifgmi_core::models::{Classifier, Variant};
use ifgmi_core::{image, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::attack::{MethodResult, GRID_COLS};
use crate::config::MetricsConfig;
use crate::error::{CliError, Result};
use crate::layout::{load_labeled, read_json, write_json, write_text};
use crate::Context;

/// Private exemplars (and reconstructions) per class in the comparison grid.
pub const GRID_PER_SIDE: usize = GRID_COLS / 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub repeat: usize,
    pub seed: u64,
    pub images: usize,
    pub failed: usize,
    pub attack_seconds: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub acc1: f64,
    pub acc5: f64,
    pub delta_eval: f64,
    pub delta_indep: f64,
    pub fid: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// The private train split scored against itself.
    pub reference: MetricsReport,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub evaluate_seconds: f64,
}

/// Models and private features shared by every scored batch.
pub struct Scorer {
    pub eval: Classifier<f32>,
    pub indep: Classifier<f32>,
    private_labels: Vec<usize>,
    private_eval: Tensor<f32>,
    private_indep: Tensor<f32>,
    pub private_images: Tensor<f32>,
    opts: MetricsConfig,
}

impl Scorer {
    pub fn load(ctx: &Context) -> Result<Self> {
        ctx.layout.require_models(&["eval", "indep"])?;
        let private = ctx.layout.load_private()?;
        let (eval, _) = ctx.layout.load_classifier(Variant::Eval)?;
        let (indep, _) = ctx.layout.load_classifier(Variant::Indep)?;
        Ok(Scorer {
            private_eval: eval.features(&private.train.images)?,
            private_indep: indep.features(&private.train.images)?,
            private_labels: private.train.labels.clone(),
            private_images: private.train.images,
            eval,
            indep,
            opts: ctx.cfg.metrics.clone(),
        })
    }

    /// Top-1 and top-5 accuracy of the evaluation model.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<(f64, f64)> {
        let logits = self.eval.logits(images)?;
        let k5 = 5.min(self.eval.classes);
        Ok((metrics::acc_at_k(&logits, labels, 1)?, metrics::acc_at_k(&logits, labels, k5)?))
    }

    pub fn score(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<MetricsReport> {
        if labels.is_empty() {
            return Err(CliError::config("no live reconstructions to score"));
        }
        let (acc1, acc5) = self.accuracy(images, labels)?;
        let fe = self.eval.features(images)?;
        let fi = self.indep.features(images)?;
        let mode = self.opts.distance;
        let prdc = if self.opts.prdc { Some(metrics::prdc(&self.private_eval, &fe, self.opts.k)?) } else { None };
        let report = MetricsReport {
            acc1,
            acc5,
            delta_eval: metrics::feature_distance(&fe, labels, &self.private_eval, &self.private_labels, mode)?,
            delta_indep: metrics::feature_distance(&fi, labels, &self.private_indep, &self.private_labels, mode)?,
            fid: metrics::fid(&fe, &self.private_eval)?,
            precision: prdc.map(|p| p.precision),
            recall: prdc.map(|p| p.recall),
            density: prdc.map(|p| p.density),
            coverage: prdc.map(|p| p.coverage),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn reference(&self) -> Result<MetricsReport> {
        self.score(&self.private_images, &self.private_labels)
    }

    /// One row per class: private exemplars on the left, reconstructions on the right.
    pub fn comparison_grid(&self, images: &Tensor<f32>, labels: &[usize], classes: &[usize]) -> Result<Tensor<f32>> {
        let blank = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let mut tiles = Vec::new();
        for &c in classes {
            let private: Vec<usize> = (0..self.private_labels.len()).filter(|&i| self.private_labels[i] == c).collect();
            let recon: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            for (src, idx) in [(&self.private_images, private), (images, recon)] {
                for k in 0..GRID_PER_SIDE {
                    tiles.push(match idx.get(k) {
                        Some(&i) => src.select_rows(&[i]),
                        None => blank.clone(),
                    });
                }
            }
        }
        let refs: Vec<&Tensor<f32>> = tiles.iter().collect();
        Ok(Tensor::stack_rows(&refs)?)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "method,repeat,seed,images,failed,acc1,acc5,delta_eval,delta_indep,fid,precision,recall,density,coverage,attack_seconds\n",
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.3}",
            r.method,
            r.repeat,
            r.seed,
            r.images,
            r.failed,
            m.acc1,
            m.acc5,
            m.delta_eval,
            m.delta_indep,
            m.fid,
            opt(m.precision),
            opt(m.recall),
            opt(m.density),
            opt(m.coverage),
            r.attack_seconds
        );
    }
    s
}

fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.method.as_str()) {
            labels.push(&r.method);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let sel: Vec<&MetricsReport> = rows.iter().filter(|r| r.method == label).map(|r| &r.metrics).collect();
            let n = sel.len() as f64;
            let avg = |f: fn(&MetricsReport) -> f64| sel.iter().map(|m| f(m)).sum::<f64>() / n;
            SummaryRow {
                method: label.to_string(),
                runs: sel.len(),
                acc1: avg(|m| m.acc1),
                acc5: avg(|m| m.acc5),
                delta_eval: avg(|m| m.delta_eval),
                delta_indep: avg(|m| m.delta_indep),
                fid: avg(|m| m.fid),
            }
        })
        .collect()
}

pub fn run(ctx: &Context) -> Result<Value> {
    let started = Instant::now();
    let scorer = Scorer::load(ctx)?;
    let report_dir = ctx.layout.report();
    ctx.layout.create(&report_dir)?;
    let mut rows = Vec::new();
    for method in &ctx.cfg.methods {
        let label = method.label();
        for repeat in 0..ctx.cfg.repeats {
            let dir = ctx.layout.attack_run(&label, repeat);
            let result: MethodResult = read_json(&format!("{label} result (repeat {repeat})"), &dir.join("result.json"))?;
            let (images, labels) = load_labeled(&dir.join("final.ifgt"))?;
            rows.push(ReportRow {
                method: label.clone(),
                repeat,
                seed: result.seed,
                images: labels.len(),
                failed: result.failed,
                attack_seconds: result.seconds,
                metrics: scorer.score(&images, &labels)?,
            });
            if repeat == 0 {
                let grid = scorer.comparison_grid(&images, &labels, &result.classes)?;
                image::write_grid(report_dir.join(format!("grid_{label}.ppm")), &grid, GRID_COLS)?;
            }
        }
    }
    let report = ExperimentReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ctx.config_hash.clone(),
        seed: ctx.seed,
        reference: scorer.reference()?,
        summary: summarize(&rows),
        rows,
        evaluate_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&report_dir.join("report.json"), &report)?;
    write_text(&report_dir.join("report.csv"), &csv(&report.rows))?;
    Ok(json!({ "command": "evaluate", "config_hash": ctx.config_hash, "summary": report.summary }))
}

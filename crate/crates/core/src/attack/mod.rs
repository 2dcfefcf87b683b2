//! Intermediate-feature inversion: initial selection in style space, a
//! style-only stage, then successive stages that optimise the generator's
//! intermediate features jointly with the style under l1-ball constraints.

mod baselines;
mod loss;
mod projection;
mod selection;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use baselines::{baseline_latent_inversion, baseline_pixel_inversion, BaselineResult};
pub use loss::{poincare_distance, poincare_loss, poincare_value, POINCARE_BOUND};
pub use projection::{l1_distance, project_l1_ball};
pub use selection::{
    choose_stages, gather, initial_select, robust_confidence, robust_confidence_with, select_final, top_k, views,
    ConfidenceMode, FinalSelection, InitialSelection,
};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{Classifier, Generator, SynthesisStack};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Attack step size. At 0.005 the styles barely leave their initial
/// selection within the desk-scale step budget.
pub const DESK_LR: f64 = 0.02;

/// Relative slack allowed when auditing the l1 constraints.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

/// A classifier as seen by the attack: images in, logits out.
pub trait LogitModel<T: Real> {
    fn classes(&self) -> usize;

    fn logits_var<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>>;

    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let out = self.logits_var(&g, g.constant(images.clone()))?;
        Ok((*out.value()).clone())
    }
}

impl<T: Real> LogitModel<T> for Classifier<T> {
    fn classes(&self) -> usize {
        self.classes
    }

    fn logits_var<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Classifier::logits_var(self, g, x, false)
    }

    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Classifier::logits(self, images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Synthesis stages after which features are optimised, increasing, in
    /// `1..=4`. Its length is the number of intermediate stages `L`.
    pub splits: Vec<usize>,
    /// Adam iterations per stage; entry 0 is the style-only stage.
    pub steps: Vec<usize>,
    /// Per-element l1 budgets; stage `i` uses radius `radii[i-1] · dim(f_i)`
    /// for both the feature and the style.
    pub radii: Vec<f64>,
    pub candidates: usize,
    pub select: usize,
    pub n_aug: usize,
    pub adam: AdamConfig,
    /// Weight of the discriminator realism term in the latent baseline.
    pub lambda: f64,
    pub final_selection: FinalSelection,
    pub confidence: ConfidenceMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::with_depth(3).expect("default depth is valid")
    }
}

impl AttackConfig {
    /// Splits after blocks `1..=l`, steps `[40, 10, …]`, radii `0.5·i`, step size [`DESK_LR`].
    pub fn with_depth(l: usize) -> Result<Self> {
        if l > SynthesisStack::<f32>::SPLIT_POINTS {
            return Err(Error::invalid(format!("L = {l} exceeds the {} split points", SynthesisStack::<f32>::SPLIT_POINTS)));
        }
        let mut steps = vec![40];
        steps.extend(std::iter::repeat_n(10, l));
        Ok(AttackConfig {
            splits: (1..=l).collect(),
            steps,
            radii: (1..=l).map(|i| 0.5 * i as f64).collect(),
            candidates: 200,
            select: 20,
            n_aug: 8,
            adam: AdamConfig { lr: DESK_LR, ..AdamConfig::default() },
            lambda: 0.0,
            final_selection: FinalSelection::BestConfidence,
            confidence: ConfidenceMode::Softmax,
        })
    }

    /// A single intermediate stage after block `split`.
    pub fn single_split(split: usize) -> Result<Self> {
        let mut cfg = Self::with_depth(1)?;
        cfg.splits = vec![split];
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn depth(&self) -> usize {
        self.splits.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.depth();
        if self.steps.len() != l + 1 {
            return Err(Error::invalid(format!("steps has {} entries, expected L+1 = {}", self.steps.len(), l + 1)));
        }
        if self.radii.len() != l {
            return Err(Error::invalid(format!("radii has {} entries, expected L = {l}", self.radii.len())));
        }
        if self.radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid("radii must be finite and non-negative"));
        }
        if self.radii.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("radii must be non-decreasing"));
        }
        let max = SynthesisStack::<f32>::SPLIT_POINTS;
        if self.splits.iter().any(|&s| s == 0 || s > max) || self.splits.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("splits {:?} must increase within 1..={max}", self.splits)));
        }
        if self.select == 0 || self.select > self.candidates {
            return Err(Error::invalid(format!("select count {} must lie in 1..={}", self.select, self.candidates)));
        }
        if self.n_aug == 0 {
            return Err(Error::invalid("n_aug must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.lambda >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and lambda non-negative"));
        }
        Ok(())
    }

    /// The first `l` intermediate stages of this configuration.
    pub fn truncated(&self, l: usize) -> Result<Self> {
        if l > self.depth() {
            return Err(Error::invalid(format!("cannot truncate depth {} to {l}", self.depth())));
        }
        let mut cfg = self.clone();
        cfg.splits.truncate(l);
        cfg.steps.truncate(l + 1);
        cfg.radii.truncate(l);
        Ok(cfg)
    }
}

/// Post-step l1 distances of one stage, relative to the radius.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub checks: u64,
    pub violations: u64,
    pub max_feature_ratio: f64,
    pub max_style_ratio: f64,
}

/// Constraint log indexed by stage; stage 0 is unconstrained and stays empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub stages: Vec<StageAudit>,
}

impl ConstraintAudit {
    fn record(&mut self, stage: usize, feature: bool, dist: f64, radius: f64) {
        if self.stages.len() <= stage {
            self.stages.resize(stage + 1, StageAudit::default());
        }
        let ratio = if radius > 0.0 {
            dist / radius
        } else if dist > 0.0 {
            f64::MAX
        } else {
            0.0
        };
        let s = &mut self.stages[stage];
        let slot = if feature { &mut s.max_feature_ratio } else { &mut s.max_style_ratio };
        *slot = slot.max(ratio);
        s.checks += 1;
        if dist > radius * (1.0 + AUDIT_TOLERANCE) {
            s.violations += 1;
        }
    }

    pub fn merge(&mut self, other: &ConstraintAudit) {
        if self.stages.len() < other.stages.len() {
            self.stages.resize(other.stages.len(), StageAudit::default());
        }
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.checks += b.checks;
            a.violations += b.violations;
            a.max_feature_ratio = a.max_feature_ratio.max(b.max_feature_ratio);
            a.max_style_ratio = a.max_style_ratio.max(b.max_style_ratio);
        }
    }

    pub fn checks(&self) -> u64 {
        self.stages.iter().map(|s| s.checks).sum()
    }

    pub fn violations(&self) -> u64 {
        self.stages.iter().map(|s| s.violations).sum()
    }

    fn truncated(&self, stages: usize) -> ConstraintAudit {
        ConstraintAudit { stages: self.stages.iter().take(stages).copied().collect() }
    }
}

/// Everything recorded while attacking one class.
#[derive(Debug, Clone)]
pub struct ClassAttack {
    pub class: usize,
    pub initial: InitialSelection,
    /// Identity loss of each selected style before any optimisation.
    pub initial_losses: Vec<f64>,
    /// One image batch per stage, `L + 1` in total.
    pub snapshots: Vec<Tensor<f32>>,
    /// Mean identity loss over live candidates, per stage and step.
    pub step_losses: Vec<Vec<f64>>,
    /// Identity loss of each snapshot, `[stage][candidate]`.
    pub stage_losses: Vec<Vec<f64>>,
    pub confidences: Vec<Vec<f64>>,
    pub chosen_stage: Vec<usize>,
    pub final_images: Tensor<f32>,
    /// Why a candidate was dropped, if it was.
    pub failed: Vec<Option<String>>,
    pub audit: ConstraintAudit,
}

impl ClassAttack {
    pub fn live(&self) -> Vec<usize> {
        (0..self.failed.len()).filter(|&j| self.failed[j].is_none()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub config: AttackConfig,
    pub classes: Vec<ClassAttack>,
    pub audit: ConstraintAudit,
    pub seconds: f64,
}

impl AttackRun {
    /// Final images of live candidates with their target classes.
    pub fn final_images(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        collect_live(&self.classes, |c| &c.final_images)
    }

    pub fn stage_images(&self, stage: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        collect_live(&self.classes, |c| &c.snapshots[stage])
    }

    pub fn failed_count(&self) -> usize {
        self.classes.iter().map(|c| c.failed.iter().filter(|f| f.is_some()).count()).sum()
    }

    /// The run that a configuration truncated to `l` intermediate stages
    /// would have produced: stages are computed in order and every random
    /// draw is made before the first stage, so the prefix is identical.
    pub fn restrict(&self, l: usize) -> Result<AttackRun> {
        let config = self.config.truncated(l)?;
        let mut classes = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            let confidences = c.confidences[..=l].to_vec();
            let chosen = choose_stages(&confidences, config.final_selection)?;
            let snapshots = c.snapshots[..=l].to_vec();
            let mut failed = c.failed.clone();
            // a candidate that failed in a later stage was still live here
            for f in failed.iter_mut() {
                if let Some(msg) = f {
                    if stage_of_failure(msg).is_some_and(|s| s > l) {
                        *f = None;
                    }
                }
            }
            let audit = c.audit.truncated(l + 1);
            classes.push(ClassAttack {
                final_images: gather(&snapshots, &chosen)?,
                chosen_stage: chosen,
                confidences,
                snapshots,
                step_losses: c.step_losses[..=l].to_vec(),
                stage_losses: c.stage_losses[..=l].to_vec(),
                failed,
                audit,
                ..c.clone()
            });
        }
        let audit = self.audit.truncated(l + 1);
        Ok(AttackRun { config, classes, audit, seconds: self.seconds })
    }
}

fn failure(stage: usize, what: &str) -> String {
    format!("stage {stage}: {what}")
}

fn stage_of_failure(msg: &str) -> Option<usize> {
    msg.strip_prefix("stage ")?.split(':').next()?.parse().ok()
}

fn collect_live(classes: &[ClassAttack], pick: impl Fn(&ClassAttack) -> &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for c in classes {
        let live = c.live();
        labels.extend(std::iter::repeat_n(c.class, live.len()));
        parts.push(pick(c).select_rows(&live));
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok((Tensor::stack_rows(&refs)?, labels))
}

/// Renders from the feature of `split` (or from the style alone) and
/// returns images with per-sample identity losses.
fn evaluate<M: LogitModel<f32> + ?Sized>(
    syn: &SynthesisStack<f32>,
    model: &M,
    classes: &[usize],
    w: &Tensor<f32>,
    f: Option<(&Tensor<f32>, usize)>,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let g = Graph::new();
    let wv = g.constant(w.clone());
    let x = match f {
        Some((f, split)) => syn.suffix(&g, g.constant(f.clone()), wv, split, false)?,
        None => syn.full(&g, wv, false)?,
    };
    let loss = poincare_loss(&g, model.logits_var(&g, x)?, classes)?;
    let losses = loss.value().data().iter().map(|&v| v as f64).collect();
    Ok(((*x.value()).clone(), losses))
}

struct Stage<'a> {
    index: usize,
    steps: usize,
    /// Feature being optimised and the split it belongs to; `None` for the
    /// style-only stage.
    feature: Option<(Tensor<f32>, usize)>,
    radius: Option<f64>,
    adam: &'a AdamConfig,
}

struct StageOutput {
    w: Tensor<f32>,
    f: Option<Tensor<f32>>,
    step_losses: Vec<f64>,
}

fn zero_rows(t: &mut Tensor<f32>, failed: &[Option<String>]) {
    for (j, f) in failed.iter().enumerate() {
        if f.is_some() {
            t.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn restore_rows(t: &mut Tensor<f32>, anchor: &Tensor<f32>, failed: &[Option<String>]) {
    for (j, f) in failed.iter().enumerate() {
        if f.is_some() {
            t.row_mut(j).copy_from_slice(anchor.row(j));
        }
    }
}

/// Adam on the style (and feature, when present) from the given anchors,
/// projecting both back onto their l1 balls after every step.
fn run_stage<M: LogitModel<f32> + ?Sized>(
    syn: &SynthesisStack<f32>,
    model: &M,
    classes: &[usize],
    w0: &Tensor<f32>,
    stage: Stage<'_>,
    failed: &mut [Option<String>],
    audit: &mut ConstraintAudit,
) -> Result<StageOutput> {
    let mut w = w0.clone();
    let f0 = stage.feature.as_ref().map(|(f, _)| f.clone());
    let mut f = f0.clone();
    let split = stage.feature.as_ref().map(|(_, s)| *s);
    let mut opt = Adam::new(*stage.adam);
    let mut step_losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let g = Graph::new();
        let wv = g.leaf(w.clone(), true);
        let fv = f.as_ref().map(|f| g.leaf(f.clone(), true));
        let x = match (fv, split) {
            (Some(fv), Some(s)) => syn.suffix(&g, fv, wv, s, false)?,
            _ => syn.full(&g, wv, false)?,
        };
        let per = poincare_loss(&g, model.logits_var(&g, x)?, classes)?;
        let values = per.value();
        let mut live_sum = 0.0;
        let mut live = 0usize;
        for (j, &v) in values.data().iter().enumerate() {
            if failed[j].is_some() {
                continue;
            }
            if v.is_finite() {
                live_sum += v as f64;
                live += 1;
            } else {
                failed[j] = Some(failure(stage.index, &format!("non-finite identity loss at step {step}")));
            }
        }
        step_losses.push(if live > 0 { live_sum / live as f64 } else { f64::NAN });
        let grads = g.backward(per.sum())?;

        let mut gw = grads.wrt(wv);
        for j in 0..classes.len() {
            if failed[j].is_none() && gw.row(j).iter().any(|v| !v.is_finite()) {
                failed[j] = Some(failure(stage.index, &format!("non-finite style gradient at step {step}")));
            }
        }
        let mut gf = fv.map(|fv| grads.wrt(fv));
        if let Some(gf) = &gf {
            for j in 0..classes.len() {
                if failed[j].is_none() && gf.row(j).iter().any(|v| !v.is_finite()) {
                    failed[j] = Some(failure(stage.index, &format!("non-finite feature gradient at step {step}")));
                }
            }
        }
        zero_rows(&mut gw, failed);
        opt.step("w", &mut w, &gw)?;
        restore_rows(&mut w, w0, failed);
        if let (Some(f), Some(gf), Some(f0)) = (f.as_mut(), gf.as_mut(), f0.as_ref()) {
            zero_rows(gf, failed);
            opt.step("f", f, gf)?;
            restore_rows(f, f0, failed);
        }

        if let Some(r_elem) = stage.radius {
            let (f0, f) = (f0.as_ref().expect("constrained stage has a feature"), f.as_mut().expect("feature"));
            let r = r_elem * f0.row_len() as f64;
            for j in 0..classes.len() {
                if failed[j].is_some() {
                    continue;
                }
                project_l1_ball(f.row_mut(j), f0.row(j), r);
                project_l1_ball(w.row_mut(j), w0.row(j), r);
                audit.record(stage.index, true, l1_distance(f.row(j), f0.row(j)), r);
                audit.record(stage.index, false, l1_distance(w.row(j), w0.row(j)), r);
            }
        }
    }
    Ok(StageOutput { w, f, step_losses })
}

/// Runs every stage for one class starting from the selected styles.
pub fn optimize_intermediate<M: LogitModel<f32> + ?Sized>(
    syn: &SynthesisStack<f32>,
    model: &M,
    class: usize,
    w_init: &Tensor<f32>,
    cfg: &AttackConfig,
    final_views: &[crate::augment::AugParams],
    initial: InitialSelection,
) -> Result<ClassAttack> {
    cfg.validate()?;
    let n = w_init.batch();
    let classes = vec![class; n];
    let mut failed: Vec<Option<String>> = vec![None; n];
    let mut audit = ConstraintAudit::default();
    let mut snapshots = Vec::with_capacity(cfg.depth() + 1);
    let mut step_losses = Vec::with_capacity(cfg.depth() + 1);
    let mut stage_losses = Vec::with_capacity(cfg.depth() + 1);
    // every split point must be reachable before any optimisation starts
    for &s in &cfg.splits {
        syn.feature_shape(s)?;
    }

    let (_, initial_losses) = evaluate(syn, model, &classes, w_init, None)?;
    let out = run_stage(
        syn,
        model,
        &classes,
        w_init,
        Stage { index: 0, steps: cfg.steps[0], feature: None, radius: None, adam: &cfg.adam },
        &mut failed,
        &mut audit,
    )?;
    let (image, losses) = evaluate(syn, model, &classes, &out.w, None)?;
    snapshots.push(image);
    stage_losses.push(losses);
    step_losses.push(out.step_losses);

    let mut w = out.w;
    let mut feature: Option<(Tensor<f32>, usize)> = None;
    for (i, &split) in cfg.splits.iter().enumerate() {
        // anchor: the blocks between the previous split and this one applied
        // to the previous stage's optimised feature and style
        let anchor = {
            let g = Graph::new();
            let wv = g.constant(w.clone());
            let (from, input) = match &feature {
                Some((f, s)) => (*s, g.constant(f.clone())),
                None => (0, syn.constant(&g, n, false)?),
            };
            (*syn.range(&g, input, wv, from, split, false)?.value()).clone()
        };
        let out = run_stage(
            syn,
            model,
            &classes,
            &w,
            Stage {
                index: i + 1,
                steps: cfg.steps[i + 1],
                feature: Some((anchor, split)),
                radius: Some(cfg.radii[i]),
                adam: &cfg.adam,
            },
            &mut failed,
            &mut audit,
        )?;
        let f = out.f.expect("feature stage returns a feature");
        let (image, losses) = evaluate(syn, model, &classes, &out.w, Some((&f, split)))?;
        snapshots.push(image);
        stage_losses.push(losses);
        step_losses.push(out.step_losses);
        w = out.w;
        feature = Some((f, split));
    }

    let (final_images, chosen_stage, confidences) =
        select_final(&snapshots, model, class, cfg.final_selection, final_views, cfg.confidence)?;
    Ok(ClassAttack {
        class,
        initial,
        initial_losses,
        snapshots,
        step_losses,
        stage_losses,
        confidences,
        chosen_stage,
        final_images,
        failed,
        audit,
    })
}

/// Optimises the style alone, without constraints.
pub fn optimize_latent_stage<M: LogitModel<f32> + ?Sized>(
    syn: &SynthesisStack<f32>,
    model: &M,
    class: usize,
    w_init: &Tensor<f32>,
    steps: usize,
    adam: &AdamConfig,
) -> Result<(Tensor<f32>, Vec<f64>, Vec<Option<String>>)> {
    let classes = vec![class; w_init.batch()];
    let mut failed = vec![None; w_init.batch()];
    let mut audit = ConstraintAudit::default();
    let out = run_stage(
        syn,
        model,
        &classes,
        w_init,
        Stage { index: 0, steps, feature: None, radius: None, adam },
        &mut failed,
        &mut audit,
    )?;
    Ok((out.w, out.step_losses, failed))
}

/// Full attack against every class in `classes`.
pub fn run_attack<M: LogitModel<f32> + ?Sized>(
    gen: &Generator<f32>,
    model: &M,
    classes: &[usize],
    cfg: &AttackConfig,
    seed_: u64,
) -> Result<AttackRun> {
    cfg.validate()?;
    let started = Instant::now();
    let final_views = views(cfg.n_aug, seed::derive(seed_, "final-views"));
    let mut results = Vec::with_capacity(classes.len());
    let mut audit = ConstraintAudit::default();
    for &class in classes {
        let class_seed = seed::derive_indexed(seed_, "attack-class", class as u64);
        let initial =
            initial_select(gen, model, class, cfg.candidates, cfg.select, cfg.n_aug, cfg.confidence, class_seed)?;
        let w = initial.w.clone();
        let r = optimize_intermediate(&gen.synthesis, model, class, &w, cfg, &final_views, initial)?;
        audit.merge(&r.audit);
        results.push(r);
    }
    Ok(AttackRun { config: cfg.clone(), classes: results, audit, seconds: started.elapsed().as_secs_f64() })
}

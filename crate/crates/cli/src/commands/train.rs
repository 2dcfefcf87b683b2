use ifgmi_core::metrics;
use ifgmi_core::models::{save_checkpoint, train_classifier, train_prior, Module, Variant};
use ifgmi_core::seed;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::layout::{ClassifierSidecar, PriorSidecar};
use crate::Context;

/// Which checkpoints to train; `all` trains the classifiers first so the
/// prior's FID can use the evaluation model's features.
fn targets(which: &str) -> Result<Vec<&'static str>> {
    Ok(match which {
        "all" => vec!["target", "eval", "indep", "prior"],
        "prior" => vec!["prior"],
        "target" => vec!["target"],
        "eval" => vec!["eval"],
        "indep" => vec!["indep"],
        other => return Err(CliError::config(format!("unknown model `{other}` (prior, target, eval, indep, all)"))),
    })
}

pub fn run(ctx: &Context, which: &str) -> Result<Value> {
    let names = targets(which)?;
    ctx.layout.create(&ctx.layout.models())?;
    let mut out = Vec::new();
    for name in names {
        let summary = match Variant::parse(name) {
            Ok(v) => train_one_classifier(ctx, v)?,
            Err(_) => train_one_prior(ctx)?,
        };
        out.push(summary);
    }
    Ok(json!({ "command": "train", "config_hash": ctx.config_hash, "models": out }))
}

fn train_one_classifier(ctx: &Context, variant: Variant) -> Result<Value> {
    let private = ctx.layout.load_private()?;
    let classes = private.manifest.identities;
    let seed = seed::derive(ctx.seed, &format!("train-{}", variant.name()));
    let (model, report) =
        train_classifier(&private.train, &private.test, classes, variant, &ctx.cfg.training.classifier, seed)?;
    let side = ClassifierSidecar { variant, classes, seed, report: report.clone(), config_hash: ctx.config_hash.clone() };
    let (t, s) = ctx.layout.model(variant.name());
    save_checkpoint(&t, &s, &[model.params()], &side)?;
    Ok(json!({
        "model": variant.name(),
        "seed": seed,
        "test_accuracy": report.test_accuracy,
        "usable": report.usable,
        "seconds": report.seconds,
    }))
}

fn train_one_prior(ctx: &Context) -> Result<Value> {
    let shift = &ctx.cfg.corpus.shift;
    let public = ctx.layout.load_public(shift)?;
    // FID is measured in the evaluation model's feature space when it exists
    let eval = match ctx.layout.load_classifier(Variant::Eval) {
        Ok((m, _)) => Some(m),
        Err(CliError::Missing { .. }) => None,
        Err(e) => return Err(e),
    };
    let corpus_fid = match &eval {
        Some(m) => {
            let private = ctx.layout.load_private()?;
            Some(metrics::fid(&m.features(&public.images)?, &m.features(&private.train.images)?)?)
        }
        None => None,
    };
    let seed = seed::derive(ctx.seed, "train-prior");
    let trained = train_prior(&public.images, &ctx.cfg.training.prior, seed, eval.as_ref())?;
    let side = PriorSidecar {
        arch: ctx.cfg.training.prior.arch,
        seed,
        epochs: ctx.cfg.training.prior.epochs,
        shift_sigma: shift.sigma()?,
        public_corpus: shift.label(),
        fid_features: eval.as_ref().map(|_| "eval".to_string()),
        public_private_fid: corpus_fid,
        report: trained.report.clone(),
        config_hash: ctx.config_hash.clone(),
    };
    let (t, s) = ctx.layout.model("prior");
    let [mapping, synthesis] = trained.generator.params();
    save_checkpoint(&t, &s, &[mapping, synthesis, trained.discriminator.params()], &side)?;
    Ok(json!({
        "model": "prior",
        "seed": seed,
        "shift": shift.label(),
        "steps": trained.report.steps,
        "fid_initial": trained.report.fid_initial,
        "fid_final": trained.report.fid_final,
        "public_private_fid": corpus_fid,
        "seconds": trained.report.seconds,
    }))
}

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, Variant};
use super::discriminator::Discriminator;
use super::generator::{Generator, GeneratorArch};
use super::params::Module;
use crate::augment::{self, AugParams};
use crate::autodiff::{Graph, Var};
use crate::data::{LabeledImages, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Minimum public corpus size accepted by [`train_prior`].
pub const MIN_PUBLIC_IMAGES: usize = 500;
/// Discriminator loss below this for [`COLLAPSE_STEPS`] consecutive steps
/// counts as divergence.
pub const COLLAPSE_LOSS: f64 = 1e-3;
pub const COLLAPSE_STEPS: usize = 200;
/// Classifiers below this test accuracy are not used for attacks.
pub const USABLE_ACCURACY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanLoss {
    /// Non-saturating logistic loss.
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorTrainConfig {
    pub arch: GeneratorArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: GanLoss,
    pub r1_gamma: f64,
    /// The R1 penalty is applied every `r1_every` discriminator steps and
    /// scaled up by the same factor.
    pub r1_every: usize,
    pub ema_decay: f64,
    /// Upper bound on FID(samples, public) checked after training when a
    /// feature model is supplied.
    pub fid_ceiling: Option<f64>,
    pub fid_samples: usize,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            arch: GeneratorArch::default(),
            epochs: 24,
            batch: 32,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            loss: GanLoss::Logistic,
            r1_gamma: 1.0,
            r1_every: 8,
            ema_decay: 0.995,
            fid_ceiling: None,
            fid_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub seed: u64,
    pub steps: usize,
    pub final_d_loss: f64,
    pub final_g_loss: f64,
    /// Mean discriminator and generator losses per epoch.
    pub epoch_losses: Vec<(f64, f64)>,
    pub fid_initial: Option<f64>,
    pub fid_final: Option<f64>,
    pub seconds: f64,
}

pub struct TrainedPrior {
    /// Exponential moving average of the generator weights.
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub report: PriorReport,
}

fn adversarial<'g>(loss: GanLoss, logits: Var<'g, f32>, real: bool) -> Var<'g, f32> {
    match (loss, real) {
        (GanLoss::Logistic, true) => logits.neg().softplus().mean(),
        (GanLoss::Logistic, false) => logits.softplus().mean(),
        (GanLoss::Hinge, true) => logits.neg().add_scalar(1.0).leaky_relu(0.0).mean(),
        (GanLoss::Hinge, false) => logits.add_scalar(1.0).leaky_relu(0.0).mean(),
    }
}

fn check_finite(what: &str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(format!("{what} loss at step {step}")))
    }
}

fn sample_fid(gen: &Generator<f32>, features: &Classifier<f32>, public_feats: &Tensor<f32>, n: usize, seed: u64) -> Result<f64> {
    let z = Generator::<f32>::sample_z(n, &mut seed::rng(seed));
    let feats = features.features(&gen.generate(&z)?)?;
    metrics::fid(&feats, public_feats)
}

/// Adversarially trains a generator on public images only.
///
/// `feature_model`, when given, is used to report FID between generated
/// samples and the public corpus before and after training.
pub fn train_prior(
    public: &Tensor<f32>,
    cfg: &PriorTrainConfig,
    seed: u64,
    feature_model: Option<&Classifier<f32>>,
) -> Result<TrainedPrior> {
    let n = public.batch();
    if n < MIN_PUBLIC_IMAGES {
        return Err(Error::invalid(format!("prior needs at least {MIN_PUBLIC_IMAGES} public images, got {n}")));
    }
    if cfg.batch == 0 || cfg.r1_every == 0 {
        return Err(Error::invalid("batch and r1_every must be positive"));
    }
    let started = Instant::now();
    let mut gen = Generator::<f32>::new(cfg.arch, seed::derive(seed, "generator"));
    let mut disc = Discriminator::<f32>::new(seed::derive(seed, "discriminator"));
    let mut ema = gen.clone();
    let adam = AdamConfig::with_lr(cfg.lr, cfg.beta1, cfg.beta2);
    let (mut g_opt, mut d_opt) = (Adam::new(adam), Adam::new(adam));
    let mut rng = seed::rng(seed::derive(seed, "prior-train"));

    let fid_seed = seed::derive(seed, "prior-fid");
    let public_feats = match feature_model {
        Some(m) => Some(m.features(public)?),
        None => None,
    };
    let fid_initial = match (feature_model, &public_feats) {
        (Some(m), Some(pf)) => Some(sample_fid(&gen, m, pf, cfg.fid_samples, fid_seed)?),
        _ => None,
    };

    let steps_per_epoch = n / cfg.batch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut collapsed = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let (mut last_d, mut last_g) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g) = (0.0, 0.0);
        for chunk in order.chunks_exact(cfg.batch).take(steps_per_epoch) {
            // discriminator
            let real = public.select_rows(chunk);
            let fake = gen.generate(&Generator::<f32>::sample_z(cfg.batch, &mut rng))?;
            let g = Graph::new();
            let on_real = disc.forward(&g, g.constant(real), true)?;
            let on_fake = disc.forward(&g, g.constant(fake), true)?;
            let mut d_loss = adversarial(cfg.loss, on_real.logits, true).add(adversarial(cfg.loss, on_fake.logits, false))?;
            let d_value = check_finite("discriminator", step, d_loss.value().item() as f64)?;
            if step % cfg.r1_every == 0 && cfg.r1_gamma > 0.0 {
                let grad = disc.input_gradient(&g, &on_real, true)?;
                let weight = 0.5 * cfg.r1_gamma * cfg.r1_every as f64 / cfg.batch as f64;
                d_loss = d_loss.add(grad.square().sum().scale(weight))?;
            }
            disc.apply_grads(&g.backward(d_loss)?, &mut d_opt)?;

            // generator
            let g = Graph::new();
            let z = g.constant(Generator::<f32>::sample_z(cfg.batch, &mut rng));
            let w = gen.mapping.forward(&g, z, true)?;
            let x = gen.synthesis.full(&g, w, true)?;
            let on_fake = disc.forward(&g, x, false)?;
            let g_loss = match cfg.loss {
                GanLoss::Logistic => adversarial(GanLoss::Logistic, on_fake.logits, true),
                GanLoss::Hinge => on_fake.logits.mean().neg(),
            };
            let g_value = check_finite("generator", step, g_loss.value().item() as f64)?;
            let grads = g.backward(g_loss)?;
            gen.mapping.apply_grads(&grads, &mut g_opt)?;
            gen.synthesis.apply_grads(&grads, &mut g_opt)?;

            let decay = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
            for (dst, src) in [
                (ema.mapping.params_mut(), gen.mapping.params()),
                (ema.synthesis.params_mut(), gen.synthesis.params()),
            ] {
                for (name, e) in dst.iter_mut() {
                    for (a, &b) in e.data_mut().iter_mut().zip(src[name].data()) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
            }

            collapsed = if d_value < COLLAPSE_LOSS { collapsed + 1 } else { 0 };
            if collapsed >= COLLAPSE_STEPS {
                return Err(Error::Diverged(format!(
                    "discriminator loss below {COLLAPSE_LOSS} for {COLLAPSE_STEPS} steps (epoch {epoch}, step {step}, g loss {g_value:.4})"
                )));
            }
            sum_d += d_value;
            sum_g += g_value;
            last_d = d_value;
            last_g = g_value;
            step += 1;
        }
        epoch_losses.push((sum_d / steps_per_epoch as f64, sum_g / steps_per_epoch as f64));
    }

    let fid_final = match (feature_model, &public_feats) {
        (Some(m), Some(pf)) => Some(sample_fid(&ema, m, pf, cfg.fid_samples, fid_seed)?),
        _ => None,
    };
    if let (Some(ceiling), Some(fid)) = (cfg.fid_ceiling, fid_final) {
        if fid > ceiling {
            return Err(Error::Diverged(format!("prior FID {fid:.3} above ceiling {ceiling}")));
        }
    }
    let report = PriorReport {
        seed,
        steps: step,
        final_d_loss: last_d,
        final_g_loss: last_g,
        epoch_losses,
        fid_initial,
        fid_final,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedPrior { generator: ema, discriminator: disc, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Train on randomly cropped and flipped views.
    pub augment: bool,
    /// Mass moved from the true label to a uniform target. Keeps logit gaps
    /// bounded so the attack's softmax does not saturate.
    pub label_smoothing: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { epochs: 30, batch: 32, lr: 1e-3, augment: true, label_smoothing: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub classes: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// False when the test accuracy is below [`USABLE_ACCURACY`].
    pub usable: bool,
    pub seconds: f64,
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy<'g>(g: &'g Graph<f32>, logits: Var<'g, f32>, labels: &[usize], smoothing: f64) -> Result<Var<'g, f32>> {
    let shape = logits.shape();
    let k = shape[1];
    let off = (smoothing / k as f64) as f32;
    let on = (1.0 - smoothing) as f32 + off;
    let onehot = Tensor::from_fn(&shape, |i| if labels[i / k] == i % k { on } else { off });
    Ok(logits.log_softmax()?.mul(g.constant(onehot))?.sum().scale(-1.0 / labels.len() as f64))
}

/// Cross-entropy training on the private train split; reports held-out accuracy.
pub fn train_classifier(
    train: &LabeledImages,
    test: &LabeledImages,
    classes: usize,
    variant: Variant,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(Classifier<f32>, ClassifierReport)> {
    if train.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("empty training set or zero batch"));
    }
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
    }
    let started = Instant::now();
    let mut model = Classifier::<f32>::new(variant, classes, seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr, 0.9, 0.999));
    let mut rng = seed::rng(seed::derive(seed, &format!("classifier-train-{}", variant.name())));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut x = train.images.select_rows(chunk);
            if cfg.augment {
                for row in x.data_mut().chunks_mut(IMAGE_LEN) {
                    let src = row.to_vec();
                    augment::apply_into(&src, AugParams::sample(&mut rng), row);
                }
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let g = Graph::new();
            let logits = model.logits_var(&g, g.constant(x), true)?;
            let loss = cross_entropy(&g, logits, &labels, cfg.label_smoothing)?;
            check_finite("classifier", 0, loss.value().item() as f64)?;
            model.apply_grads(&g.backward(loss)?, &mut opt)?;
        }
    }
    let train_accuracy = model.accuracy(&train.images, &train.labels)?;
    let test_accuracy = model.accuracy(&test.images, &test.labels)?;
    let report = ClassifierReport {
        variant,
        seed,
        epochs: cfg.epochs,
        classes,
        train_accuracy,
        test_accuracy,
        usable: test_accuracy >= USABLE_ACCURACY,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        let l = cross_entropy(&g, logits, &[0, 1, 3], 0.0).unwrap().value().item();
        assert!((l - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn prior_rejects_small_corpus() {
        let public = Tensor::zeros(&[10, 3, 32, 32]);
        assert!(matches!(train_prior(&public, &PriorTrainConfig::default(), 0, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn classifier_rejects_out_of_range_labels() {
        let set = LabeledImages { images: Tensor::zeros(&[2, 3, 32, 32]), labels: vec![0, 5] };
        let r = train_classifier(&set, &set, 3, Variant::Target, &ClassifierTrainConfig::default(), 0);
        assert!(r.is_err());
    }
}

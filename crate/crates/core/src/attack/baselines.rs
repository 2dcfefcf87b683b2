use super::loss::poincare_loss;
use super::LogitModel;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub images: Tensor<f32>,
    /// Mean identity loss per step.
    pub losses: Vec<f64>,
}

fn checked_mean(per: &Tensor<f32>, step: usize) -> Result<f64> {
    let mean = per.data().iter().map(|&v| v as f64).sum::<f64>() / per.numel().max(1) as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFiniteLoss(format!("baseline identity loss at step {step}")))
    }
}

/// Adam directly on pixels from uniform noise, clamped to `[-1, 1]`.
pub fn baseline_pixel_inversion<M: LogitModel<f32> + ?Sized>(
    model: &M,
    class: usize,
    count: usize,
    steps: usize,
    adam: &AdamConfig,
    seed_: u64,
) -> Result<BaselineResult> {
    let mut rng = seed::rng(seed::derive(seed_, "pixel-init"));
    let mut x = Tensor::<f32>::uniform(&[count, 3, 32, 32], -1.0, 1.0, &mut rng);
    let classes = vec![class; count];
    let mut opt = Adam::new(*adam);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let per = poincare_loss(&g, model.logits_var(&g, xv)?, &classes)?;
        losses.push(checked_mean(&per.value(), step)?);
        let grad = g.backward(per.sum())?.wrt(xv);
        opt.step("pixels", &mut x, &grad)?;
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }
    Ok(BaselineResult { images: x, losses })
}

/// Adam over the generator's input latent `z`, with an optional
/// discriminator realism term weighted by `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_latent_inversion<M: LogitModel<f32> + ?Sized>(
    gen: &Generator<f32>,
    disc: Option<&Discriminator<f32>>,
    model: &M,
    class: usize,
    count: usize,
    steps: usize,
    lambda: f64,
    adam: &AdamConfig,
    seed_: u64,
) -> Result<BaselineResult> {
    if lambda > 0.0 && disc.is_none() {
        return Err(Error::invalid("lambda > 0 needs a discriminator"));
    }
    let mut z = Generator::<f32>::sample_z(count, &mut seed::rng(seed::derive(seed_, "latent-init")));
    let classes = vec![class; count];
    let mut opt = Adam::new(*adam);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = Graph::new();
        let zv = g.leaf(z.clone(), true);
        let x = gen.synthesis.full(&g, gen.mapping.forward(&g, zv, false)?, false)?;
        let per = poincare_loss(&g, model.logits_var(&g, x)?, &classes)?;
        losses.push(checked_mean(&per.value(), step)?);
        let mut total = per.sum();
        if let (Some(d), true) = (disc, lambda > 0.0) {
            let realism = d.forward(&g, x, false)?.logits.neg().softplus().sum();
            total = total.add(realism.scale(lambda))?;
        }
        let grad = g.backward(total)?.wrt(zv);
        opt.step("z", &mut z, &grad)?;
    }
    Ok(BaselineResult { images: gen.generate(&z)?, losses })
}

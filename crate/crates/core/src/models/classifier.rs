use serde::{Deserialize, Serialize};

use super::params::{self, insert_conv, insert_linear, Module, ParamMap, LRELU_GAIN, LRELU_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const FEATURE_DIM: usize = 64;

/// Role of a classifier in the experiment. Each role has its own widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The attacked model.
    Target,
    /// Scores reconstructions (Acc@k, δ_eval, FID features).
    Eval,
    /// Independent feature space for δ_indep.
    Indep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Target, Variant::Eval, Variant::Indep];

    pub fn widths(self) -> [usize; 3] {
        match self {
            Variant::Target => [16, 32, 64],
            Variant::Eval => [24, 48, 64],
            Variant::Indep => [12, 24, 48],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Target => "target",
            Variant::Eval => "eval",
            Variant::Indep => "indep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown classifier variant {s:?}")))
    }
}

/// Three conv+pool stages, a 64-d feature layer and a linear head.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub variant: Variant,
    pub classes: usize,
    params: ParamMap<T>,
}

impl<T: Real> Module<T> for Classifier<T> {
    fn params(&self) -> &ParamMap<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }
}

impl<T: Real> Classifier<T> {
    pub fn new(variant: Variant, classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, &format!("classifier-init-{}", variant.name())));
        let mut params = ParamMap::new();
        let mut c_in = 3;
        for (i, &c) in variant.widths().iter().enumerate() {
            insert_conv(&mut params, &format!("cls.conv{i}"), c_in, c, 3, LRELU_GAIN, &mut rng);
            c_in = c;
        }
        insert_linear(&mut params, "cls.feat", c_in * 16, FEATURE_DIM, LRELU_GAIN, &mut rng);
        insert_linear(&mut params, "cls.head", FEATURE_DIM, classes, 1.0, &mut rng);
        Classifier { variant, classes, params }
    }

    pub fn from_params(variant: Variant, classes: usize, all: &ParamMap<T>) -> Result<Self> {
        let template = Self::new(variant, classes, 0);
        Ok(Classifier { variant, classes, params: params::adopt(all, &template.params, variant.name())? })
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier { variant: self.variant, classes: self.classes, params: params::cast_params(&self.params) }
    }

    /// Penultimate activations, `[B, 64]`.
    pub fn features_var<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        let mut h = x;
        for i in 0..3 {
            h = params::conv(self, g, &format!("cls.conv{i}"), h, trainable)?.leaky_relu(LRELU_SLOPE).avg_pool2x()?;
        }
        let b = h.shape()[0];
        let flat = h.reshape(&[b, self.variant.widths()[2] * 16])?;
        Ok(params::linear(self, g, "cls.feat", flat, trainable)?.leaky_relu(LRELU_SLOPE))
    }

    pub fn head<'g>(&self, g: &'g Graph<T>, features: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        params::linear(self, g, "cls.head", features, trainable)
    }

    pub fn logits_var<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        let f = self.features_var(g, x, trainable)?;
        self.head(g, f, trainable)
    }

    fn batched(&self, images: &Tensor<T>, logits: bool) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        for start in (0..images.batch()).step_by(128) {
            let idx: Vec<usize> = (start..(start + 128).min(images.batch())).collect();
            let g = Graph::new();
            let x = g.constant(images.select_rows(&idx));
            let out = if logits { self.logits_var(&g, x, false)? } else { self.features_var(&g, x, false)? };
            parts.push((*out.value()).clone());
        }
        if parts.is_empty() {
            let width = if logits { self.classes } else { FEATURE_DIM };
            return Ok(Tensor::zeros(&[0, width]));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::stack_rows(&refs)
    }

    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched(images, false)
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched(images, true)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut p = self.logits(images)?;
        let k = self.classes;
        for row in p.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(p)
    }

    /// Arg-max class per image, lowest index on ties.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.data().chunks(self.classes).map(argmax).collect())
    }

    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        if labels.is_empty() {
            return Ok(0.0);
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

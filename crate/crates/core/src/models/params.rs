use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::optim::Adam;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Named parameter tensors, iterated in name order.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

pub trait Module<T: Real> {
    fn params(&self) -> &ParamMap<T>;
    fn params_mut(&mut self) -> &mut ParamMap<T>;

    fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params().get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    fn bind<'g>(&self, g: &'g Graph<T>, name: &str, trainable: bool) -> Result<Var<'g, T>> {
        Ok(g.param(name, self.param(name)?, trainable))
    }

    fn num_params(&self) -> usize {
        self.params().values().map(|t| t.numel()).sum()
    }

    /// Applies one optimizer step to every parameter that received a gradient.
    fn apply_grads(&mut self, grads: &Gradients<T>, opt: &mut Adam<T>) -> Result<()> {
        for (name, p) in self.params_mut().iter_mut() {
            if let Some(g) = grads.param(name) {
                opt.step(name, p, &g)?;
            }
        }
        Ok(())
    }

    fn checksum(&self) -> String {
        let refs: Vec<(&str, &Tensor<T>)> = self.params().iter().map(|(k, v)| (k.as_str(), v)).collect();
        seed::hex_digest(&io::encode(&refs))
    }
}

pub(crate) fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}

/// Gain for leaky-rectifier layers with slope 0.2.
pub(crate) const LRELU_GAIN: f64 = 1.386_750_5; // sqrt(2 / (1 + 0.2^2))
pub(crate) const LRELU_SLOPE: f64 = 0.2;

pub(crate) fn linear<'g, T: Real, M: Module<T> + ?Sized>(
    m: &M,
    g: &'g Graph<T>,
    prefix: &str,
    x: Var<'g, T>,
    trainable: bool,
) -> Result<Var<'g, T>> {
    let w = m.bind(g, &format!("{prefix}.weight"), trainable)?;
    let b = m.bind(g, &format!("{prefix}.bias"), trainable)?;
    x.matmul(w)?.add_channel_bias(b)
}

pub(crate) fn conv<'g, T: Real, M: Module<T> + ?Sized>(
    m: &M,
    g: &'g Graph<T>,
    prefix: &str,
    x: Var<'g, T>,
    trainable: bool,
) -> Result<Var<'g, T>> {
    let w = m.bind(g, &format!("{prefix}.weight"), trainable)?;
    let b = m.bind(g, &format!("{prefix}.bias"), trainable)?;
    x.conv2d(w)?.add_channel_bias(b)
}

pub(crate) fn insert_linear<T: Real, R: Rng + ?Sized>(
    p: &mut ParamMap<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) {
    p.insert(format!("{prefix}.weight"), he_normal(&[fan_in, fan_out], fan_in, gain, rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn insert_conv<T: Real, R: Rng + ?Sized>(
    p: &mut ParamMap<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    gain: f64,
    rng: &mut R,
) {
    let fan_in = c_in * kernel * kernel;
    p.insert(format!("{prefix}.weight"), he_normal(&[c_out, c_in, kernel, kernel], fan_in, gain, rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
}

pub(crate) fn cast_params<T: Real, U: Real>(p: &ParamMap<T>) -> ParamMap<U> {
    p.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Writes parameters to a tensor file plus a JSON sidecar.
pub fn save_checkpoint<T: Real, S: Serialize>(
    tensor_path: &Path,
    sidecar_path: &Path,
    params: &[&ParamMap<T>],
    sidecar: &S,
) -> Result<()> {
    let refs: Vec<(&str, &Tensor<T>)> =
        params.iter().flat_map(|p| p.iter().map(|(k, v)| (k.as_str(), v))).collect();
    io::save(tensor_path, &refs)?;
    std::fs::write(sidecar_path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real, S: DeserializeOwned>(tensor_path: &Path, sidecar_path: &Path) -> Result<(ParamMap<T>, S)> {
    let tensors = io::load::<T>(tensor_path)?;
    let sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    Ok((tensors.into_iter().collect(), sidecar))
}

/// Takes the entries under `prefix.` and checks they match `expected`'s
/// names and shapes.
pub(crate) fn adopt<T: Real>(all: &ParamMap<T>, expected: &ParamMap<T>, what: &str) -> Result<ParamMap<T>> {
    let mut out = ParamMap::new();
    for (name, t) in expected {
        let stored = all.get(name).ok_or_else(|| Error::MissingParameter(format!("{what}: {name}")))?;
        if stored.shape() != t.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{what}: {name} stored as {:?}, architecture expects {:?}", stored.shape(), t.shape()),
            ));
        }
        out.insert(name.clone(), stored.clone());
    }
    Ok(out)
}

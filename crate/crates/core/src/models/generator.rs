//! Style-modulated generator: a mapping network `z -> w` and a synthesis
//! stack that can be cut after any block.

use serde::{Deserialize, Serialize};

use super::params::{self, insert_conv, insert_linear, Module, ParamMap, LRELU_GAIN, LRELU_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const LATENT_DIM: usize = 64;
pub const STYLE_DIM: usize = 64;
pub const CONST_CHANNELS: usize = 64;
pub const CONST_SIZE: usize = 4;
const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    /// Output channels of the four synthesis blocks (4, 8, 16, 32 px).
    pub block_channels: [usize; 4],
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch { block_channels: [64, 64, 32, 16] }
    }
}

#[derive(Debug, Clone)]
pub struct MappingNetwork<T> {
    params: ParamMap<T>,
}

impl<T: Real> Module<T> for MappingNetwork<T> {
    fn params(&self) -> &ParamMap<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }
}

impl<T: Real> MappingNetwork<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "mapping-init"));
        let mut params = ParamMap::new();
        for i in 0..3 {
            let fan_in = if i == 0 { LATENT_DIM } else { STYLE_DIM };
            insert_linear(&mut params, &format!("map.fc{i}"), fan_in, STYLE_DIM, LRELU_GAIN, &mut rng);
        }
        MappingNetwork { params }
    }

    /// `[B, 64] -> [B, 64]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, z: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        let mut h = z;
        for i in 0..3 {
            h = params::linear(self, g, &format!("map.fc{i}"), h, trainable)?.leaky_relu(LRELU_SLOPE);
        }
        Ok(h)
    }

    pub fn cast<U: Real>(&self) -> MappingNetwork<U> {
        MappingNetwork { params: params::cast_params(&self.params) }
    }
}

/// Learned constant followed by stages `1..=5`: four style-modulated blocks
/// and a 1×1 projection to RGB with `tanh`.
#[derive(Debug, Clone)]
pub struct SynthesisStack<T> {
    pub arch: GeneratorArch,
    params: ParamMap<T>,
}

impl<T: Real> Module<T> for SynthesisStack<T> {
    fn params(&self) -> &ParamMap<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }
}

impl<T: Real> SynthesisStack<T> {
    /// Number of stages after the constant input; the last one emits RGB.
    pub const STAGES: usize = 5;
    /// Valid cut points for intermediate features (after blocks 1..=4).
    pub const SPLIT_POINTS: usize = 4;

    pub fn new(arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "synthesis-init"));
        let mut params = ParamMap::new();
        params.insert("syn.const".to_string(), Tensor::randn(&[CONST_CHANNELS, CONST_SIZE, CONST_SIZE], 1.0, &mut rng));
        let mut c_in = CONST_CHANNELS;
        for (i, &c) in arch.block_channels.iter().enumerate() {
            let p = format!("syn.b{}", i + 1);
            insert_conv(&mut params, &format!("{p}.conv"), c_in, c, 3, LRELU_GAIN, &mut rng);
            // style scale starts near 1 (added inside forward), shift near 0
            insert_linear(&mut params, &format!("{p}.style_scale"), STYLE_DIM, c, 0.25, &mut rng);
            insert_linear(&mut params, &format!("{p}.style_shift"), STYLE_DIM, c, 0.25, &mut rng);
            c_in = c;
        }
        insert_conv(&mut params, "syn.rgb", c_in, 3, 1, 1.0, &mut rng);
        SynthesisStack { arch, params }
    }

    pub fn from_params(arch: GeneratorArch, all: &ParamMap<T>) -> Result<Self> {
        let template = Self::new(arch, 0);
        Ok(SynthesisStack { arch, params: params::adopt(all, &template.params, "synthesis")? })
    }

    pub fn cast<U: Real>(&self) -> SynthesisStack<U> {
        SynthesisStack { arch: self.arch, params: params::cast_params(&self.params) }
    }

    /// Per-sample shape of the tensor produced by stage `i` (`0` = constant).
    pub fn feature_shape(&self, i: usize) -> Result<[usize; 3]> {
        let c = &self.arch.block_channels;
        Ok(match i {
            0 => [CONST_CHANNELS, CONST_SIZE, CONST_SIZE],
            1..=4 => {
                let s = CONST_SIZE << (i - 1);
                [c[i - 1], s, s]
            }
            5 => [3, CONST_SIZE << 3, CONST_SIZE << 3],
            _ => return Err(Error::invalid(format!("stage {i} out of range 0..={}", Self::STAGES))),
        })
    }

    /// Applies stage `i` (1-based) to `x` under style `w`.
    pub fn stage<'g>(&self, g: &'g Graph<T>, i: usize, x: Var<'g, T>, w: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        match i {
            1..=4 => {
                let p = format!("syn.b{i}");
                let x = if i > 1 { x.upsample2x()? } else { x };
                let h = params::conv(self, g, &format!("{p}.conv"), x, trainable)?.instance_norm(IN_EPS)?;
                let scale = params::linear(self, g, &format!("{p}.style_scale"), w, trainable)?.add_scalar(1.0);
                let shift = params::linear(self, g, &format!("{p}.style_shift"), w, trainable)?;
                Ok(h.modulate(scale, shift)?.leaky_relu(LRELU_SLOPE))
            }
            5 => Ok(params::conv(self, g, "syn.rgb", x, trainable)?.tanh()),
            _ => Err(Error::invalid(format!("stage {i} out of range 1..={}", Self::STAGES))),
        }
    }

    /// The learned constant replicated over a batch of `batch`.
    pub fn constant<'g>(&self, g: &'g Graph<T>, batch: usize, trainable: bool) -> Result<Var<'g, T>> {
        Ok(self.bind(g, "syn.const", trainable)?.repeat_batch(batch))
    }

    /// Feature after stage `i`: `G_i ∘ … ∘ G_1` applied to the constant.
    pub fn prefix<'g>(&self, g: &'g Graph<T>, w: Var<'g, T>, i: usize, trainable: bool) -> Result<Var<'g, T>> {
        self.feature_shape(i)?;
        let batch = w.shape()[0];
        let mut h = self.constant(g, batch, trainable)?;
        for s in 1..=i {
            h = self.stage(g, s, h, w, trainable)?;
        }
        Ok(h)
    }

    /// Remaining stages `i+1..=5` applied to a feature produced by stage `i`.
    pub fn suffix<'g>(&self, g: &'g Graph<T>, f: Var<'g, T>, w: Var<'g, T>, i: usize, trainable: bool) -> Result<Var<'g, T>> {
        self.range(g, f, w, i, Self::STAGES, trainable)
    }

    /// Stages `from+1..=to` applied to the feature of stage `from`.
    pub fn range<'g>(
        &self,
        g: &'g Graph<T>,
        f: Var<'g, T>,
        w: Var<'g, T>,
        from: usize,
        to: usize,
        trainable: bool,
    ) -> Result<Var<'g, T>> {
        let expected = self.feature_shape(from)?;
        self.feature_shape(to)?;
        let fs = f.shape();
        let ws = w.shape();
        if fs.len() != 4 || fs[1..] != expected || ws.len() != 2 || ws[0] != fs[0] || ws[1] != STYLE_DIM {
            return Err(Error::shape(
                "synthesis",
                format!("feature {:?} with style {:?} does not fit stage {from} output {:?}", fs, ws, expected),
            ));
        }
        let mut h = f;
        for s in from + 1..=to {
            h = self.stage(g, s, h, w, trainable)?;
        }
        Ok(h)
    }

    pub fn full<'g>(&self, g: &'g Graph<T>, w: Var<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        self.prefix(g, w, Self::STAGES, trainable)
    }
}

/// Mapping network plus synthesis stack.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub mapping: MappingNetwork<T>,
    pub synthesis: SynthesisStack<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(arch: GeneratorArch, seed: u64) -> Self {
        Generator { mapping: MappingNetwork::new(seed), synthesis: SynthesisStack::new(arch, seed) }
    }

    pub fn from_params(arch: GeneratorArch, all: &ParamMap<T>) -> Result<Self> {
        let mapping = MappingNetwork { params: params::adopt(all, &MappingNetwork::<T>::new(0).params, "mapping")? };
        Ok(Generator { mapping, synthesis: SynthesisStack::from_params(arch, all)? })
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator { mapping: self.mapping.cast(), synthesis: self.synthesis.cast() }
    }

    pub fn sample_z<R: rand::Rng + ?Sized>(batch: usize, rng: &mut R) -> Tensor<T> {
        Tensor::randn(&[batch, LATENT_DIM], 1.0, rng)
    }

    /// Maps a batch of latents to styles without recording gradients.
    pub fn map_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let w = self.mapping.forward(&g, g.constant(z.clone()), false)?;
        Ok((*w.value()).clone())
    }

    /// Renders styles to images in chunks, without recording gradients.
    pub fn synthesize(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        for start in (0..w.batch()).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(w.batch())).collect();
            let g = Graph::new();
            let x = self.synthesis.full(&g, g.constant(w.select_rows(&idx)), false)?;
            parts.push((*x.value()).clone());
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::stack_rows(&refs)
    }

    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.synthesize(&self.map_latent(z)?)
    }

    pub fn params(&self) -> [&ParamMap<T>; 2] {
        [self.mapping.params(), self.synthesis.params()]
    }

    pub fn checksum(&self) -> String {
        format!("{}{}", self.mapping.checksum(), self.synthesis.checksum())
    }
}

use super::params::{self, insert_conv, insert_linear, Module, ParamMap, LRELU_GAIN, LRELU_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::seed;
use crate::tensor::Real;
#[cfg(test)]
use crate::tensor::Tensor;

const CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Four convolution stages (32, 16, 8, 4 px) and a linear realness head.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    params: ParamMap<T>,
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> &ParamMap<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }
}

/// Pre-activations kept from a forward pass; they fix the leaky-rectifier
/// slopes used by the input-gradient graph.
pub struct DiscForward<'g, T: Real> {
    pub logits: Var<'g, T>,
    pre: Vec<Var<'g, T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "discriminator-init"));
        let mut params = ParamMap::new();
        let mut c_in = 3;
        for (i, &c) in CHANNELS.iter().enumerate() {
            insert_conv(&mut params, &format!("disc.conv{i}"), c_in, c, 3, LRELU_GAIN, &mut rng);
            c_in = c;
        }
        insert_linear(&mut params, "disc.fc", c_in * 16, 1, 1.0, &mut rng);
        Discriminator { params }
    }

    pub fn from_params(all: &ParamMap<T>) -> Result<Self> {
        Ok(Discriminator { params: params::adopt(all, &Self::new(0).params, "discriminator")? })
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, trainable: bool) -> Result<DiscForward<'g, T>> {
        let mut h = x;
        let mut pre = Vec::with_capacity(CHANNELS.len());
        for i in 0..CHANNELS.len() {
            let z = params::conv(self, g, &format!("disc.conv{i}"), h, trainable)?;
            pre.push(z);
            h = z.leaky_relu(LRELU_SLOPE);
            if i + 1 < CHANNELS.len() {
                h = h.avg_pool2x()?;
            }
        }
        let b = h.shape()[0];
        let logits = params::linear(self, g, "disc.fc", h.reshape(&[b, CHANNELS[3] * 16])?, trainable)?;
        Ok(DiscForward { logits, pre })
    }

    /// `∂ Σ_b D(x_b) / ∂x` built from differentiable ops, so a penalty on its
    /// norm can itself be differentiated with respect to the parameters.
    ///
    /// The rectifier slopes are piecewise constant, so treating them as
    /// constants gives the exact gradient of the penalty.
    pub fn input_gradient<'g>(&self, g: &'g Graph<T>, fwd: &DiscForward<'g, T>, trainable: bool) -> Result<Var<'g, T>> {
        let b = fwd.logits.shape()[0];
        let slope = T::of(LRELU_SLOPE);
        let fc = self.bind(g, "disc.fc.weight", trainable)?;
        let mut grad = fc.reshape(&[CHANNELS[3], 4, 4])?.repeat_batch(b);
        for i in (0..CHANNELS.len()).rev() {
            if i + 1 < CHANNELS.len() {
                grad = grad.upsample2x()?.scale(0.25);
            }
            let mask = fwd.pre[i].value().map(|v| if v > T::zero() { T::one() } else { slope });
            grad = grad.mul(g.constant(mask))?;
            grad = grad.conv2d_transpose(self.bind(g, &format!("disc.conv{i}.weight"), trainable)?)?;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_gradient_matches_autodiff() {
        let d = Discriminator::<f64>::new(5);
        let x = Tensor::randn(&[2, 3, 32, 32], 0.5, &mut seed::rng(1));
        let g = Graph::new();
        let xv = g.leaf(x, true);
        let fwd = d.forward(&g, xv, false).unwrap();
        let built = d.input_gradient(&g, &fwd, false).unwrap().value();
        let reference = g.backward(fwd.logits.sum()).unwrap().wrt(xv);
        assert!(built.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn logits_shape() {
        let d = Discriminator::<f32>::new(5);
        let g = Graph::new();
        let fwd = d.forward(&g, g.constant(Tensor::zeros(&[3, 3, 32, 32])), false).unwrap();
        assert_eq!(fwd.logits.shape(), vec![3, 1]);
    }
}

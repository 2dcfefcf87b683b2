//! Central finite-difference verification of reverse-mode gradients.
//!
//! Everything here runs in f64. Non-scalar outputs are reduced with a fixed
//! pseudo-random projection so that every output element contributes.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::seed;
use crate::tensor::Tensor;

/// Builds the checked expression from input leaves.
pub trait Expr: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> {}
impl<F> Expr for F where F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> {}

/// Pins a closure to the higher-ranked [`Expr`] signature, which inference
/// does not pick on its own when the closure captures its environment.
pub fn expr<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    f
}

fn projection(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7548776662).fract() * 2.0 - 1.0 + 0.1)
}

fn scalarize<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    if out.value().numel() == 1 {
        return Ok(out);
    }
    let w = g.constant(projection(&out.shape()));
    Ok(out.mul(w)?.sum())
}

fn eval<F: Expr + ?Sized>(inputs: &[Tensor<f64>], f: &F) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = scalarize(&g, f(&g, &vars)?)?;
    let v = out.value().item();
    Ok(v)
}

/// Reverse-mode gradients of the (scalarized) expression.
pub fn analytic<F: Expr + ?Sized>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = scalarize(&g, f(&g, &vars)?)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Central-difference gradients with step `h`.
pub fn numeric<F: Expr + ?Sized>(inputs: &[Tensor<f64>], h: f64, f: &F) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work, f)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work, f)?;
            work[k].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs.
pub fn check<F: Expr + ?Sized>(inputs: &[Tensor<f64>], h: f64, f: &F) -> Result<f64> {
    let a = analytic(inputs, f)?;
    let n = numeric(inputs, h, f)?;
    Ok(a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

/// A named primitive with a generator of well-conditioned random inputs.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: fn(&mut seed::StageRng) -> Vec<Tensor<f64>>,
    pub expr: Box<dyn Expr>,
}

fn away_from_zero(shape: &[usize], rng: &mut seed::StageRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn normal(shape: &[usize], rng: &mut seed::StageRng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn case(
    name: &'static str,
    inputs: fn(&mut seed::StageRng) -> Vec<Tensor<f64>>,
    expr: impl Expr + 'static,
) -> PrimitiveCase {
    PrimitiveCase { name, inputs, expr: Box::new(expr) }
}

/// One case per differentiable primitive of the engine.
pub fn primitive_suite() -> Vec<PrimitiveCase> {
    vec![
        case("add", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |_, v| v[0].add(v[1])),
        case("sub", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |_, v| v[0].sub(v[1])),
        case("mul", |r| vec![normal(&[3, 4], r), normal(&[3, 4], r)], |_, v| v[0].mul(v[1])),
        case(
            "div",
            |r| vec![normal(&[3, 4], r), away_from_zero(&[3, 4], r).map(|x| x + x.signum())],
            |_, v| v[0].div(v[1]),
        ),
        case("scale", |r| vec![normal(&[5], r)], |_, v| Ok(v[0].scale(-1.7))),
        case("add_scalar", |r| vec![normal(&[5], r)], |_, v| Ok(v[0].add_scalar(0.3).square())),
        case("matmul", |r| vec![normal(&[3, 4], r), normal(&[4, 2], r)], |_, v| v[0].matmul(v[1])),
        case("transpose", |r| vec![normal(&[3, 4], r)], |_, v| v[0].transpose()),
        case("reshape", |r| vec![normal(&[2, 6], r)], |_, v| v[0].reshape(&[3, 4])),
        case("repeat_batch", |r| vec![normal(&[2, 3], r)], |_, v| Ok(v[0].repeat_batch(3))),
        case(
            "conv2d_3x3",
            |r| vec![normal(&[2, 3, 5, 4], r), normal(&[4, 3, 3, 3], r)],
            |_, v| v[0].conv2d(v[1]),
        ),
        case("conv2d_1x1", |r| vec![normal(&[2, 3, 4, 4], r), normal(&[2, 3, 1, 1], r)], |_, v| v[0].conv2d(v[1])),
        case(
            "conv2d_transpose",
            |r| vec![normal(&[2, 4, 4, 5], r), normal(&[4, 3, 3, 3], r)],
            |_, v| v[0].conv2d_transpose(v[1]),
        ),
        case("upsample2x", |r| vec![normal(&[2, 2, 3, 3], r)], |_, v| v[0].upsample2x()),
        case("avg_pool2x", |r| vec![normal(&[2, 2, 4, 6], r)], |_, v| v[0].avg_pool2x()),
        case(
            "add_channel_bias",
            |r| vec![normal(&[2, 3, 2, 2], r), normal(&[3], r)],
            |_, v| v[0].add_channel_bias(v[1]),
        ),
        case(
            "modulate",
            |r| vec![normal(&[2, 3, 2, 2], r), normal(&[2, 3], r), normal(&[2, 3], r)],
            |_, v| v[0].modulate(v[1], v[2]),
        ),
        case("leaky_relu", |r| vec![away_from_zero(&[4, 5], r)], |_, v| Ok(v[0].leaky_relu(0.2))),
        case("tanh", |r| vec![normal(&[4, 5], r)], |_, v| Ok(v[0].tanh())),
        case("exp", |r| vec![normal(&[4, 5], r)], |_, v| Ok(v[0].exp())),
        case("softplus", |r| vec![normal(&[4, 5], r).map(|x| 3.0 * x)], |_, v| Ok(v[0].softplus())),
        case("log", |r| vec![away_from_zero(&[4, 5], r).map(|x| x.abs() + 0.2)], |_, v| Ok(v[0].log())),
        case("sqrt", |r| vec![away_from_zero(&[4, 5], r).map(|x| x.abs() + 0.2)], |_, v| Ok(v[0].sqrt())),
        case("square", |r| vec![normal(&[4, 5], r)], |_, v| Ok(v[0].square())),
        case(
            "arccosh",
            |r| vec![away_from_zero(&[4, 5], r).map(|x| 1.2 + 2.0 * x.abs())],
            |_, v| Ok(v[0].arccosh()),
        ),
        case(
            "instance_norm",
            |r| vec![normal(&[2, 3, 3, 3], r)],
            |_, v| v[0].instance_norm(1e-5),
        ),
        case("softmax", |r| vec![normal(&[3, 5], r)], |_, v| v[0].softmax()),
        case("log_softmax", |r| vec![normal(&[3, 5], r)], |_, v| v[0].log_softmax()),
        case(
            "clamp_row_norm",
            // first row well above the bound, second well below
            |r| {
                let mut t = normal(&[2, 4], r);
                let n0 = t.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
                let n1 = t.row(1).iter().map(|x| x * x).sum::<f64>().sqrt();
                t.row_mut(0).iter_mut().for_each(|x| *x *= 2.0 / n0);
                t.row_mut(1).iter_mut().for_each(|x| *x *= 0.5 / n1);
                vec![t]
            },
            |_, v| v[0].clamp_row_norm(1.0),
        ),
        case("sum", |r| vec![normal(&[3, 4], r)], |_, v| Ok(v[0].sum())),
        case("mean", |r| vec![normal(&[3, 4], r)], |_, v| Ok(v[0].mean())),
        case("sum_rows", |r| vec![normal(&[3, 2, 2], r)], |_, v| v[0].sum_rows()),
        case("l1_norm", |r| vec![away_from_zero(&[3, 4], r)], |_, v| Ok(v[0].l1_norm())),
        case("l2_norm", |r| vec![normal(&[3, 4], r)], |_, v| Ok(v[0].l2_norm())),
    ]
}

/// Runs `instances` random draws of one case and returns the worst error.
pub fn run_case(case: &PrimitiveCase, instances: usize, h: f64, master_seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = seed::rng(seed::derive_indexed(master_seed, case.name, i as u64));
        let inputs = (case.inputs)(&mut rng);
        worst = worst.max(check(&inputs, h, &*case.expr)?);
    }
    Ok(worst)
}

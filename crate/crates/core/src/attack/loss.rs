use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Both points are kept strictly inside the unit ball by this norm bound.
pub const POINCARE_BOUND: f64 = 0.9999;

/// Per-sample Poincaré distance between the clamped softmax of `logits`
/// (`[B, K]`) and a scaled one-hot of each row's target class. Returns `[B]`.
pub fn poincare_loss<'g, T: Real>(g: &'g Graph<T>, logits: Var<'g, T>, classes: &[usize]) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != classes.len() {
        return Err(Error::shape("poincare_loss", format!("logits {:?} for {} targets", shape, classes.len())));
    }
    let k = shape[1];
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("target class {c} outside 0..{k}")));
    }
    let v1 = logits.softmax()?.clamp_row_norm(POINCARE_BOUND)?;
    poincare_distance(g, v1, classes)
}

/// The distance itself, for a `v1` already inside the unit ball.
pub fn poincare_distance<'g, T: Real>(g: &'g Graph<T>, v1: Var<'g, T>, classes: &[usize]) -> Result<Var<'g, T>> {
    let k = v1.shape()[1];
    let bound = T::of(POINCARE_BOUND);
    let v2 = Tensor::from_fn(&[classes.len(), k], |i| if classes[i / k] == i % k { bound } else { T::zero() });
    let v2_gap = 1.0 - POINCARE_BOUND * POINCARE_BOUND;
    let num = v1.sub(g.constant(v2))?.square().sum_rows()?;
    let den = v1.square().sum_rows()?.neg().add_scalar(1.0).scale(v2_gap);
    Ok(num.scale(2.0).div(den)?.add_scalar(1.0).arccosh())
}

/// Scalar evaluation used as a reference in tests and reports.
pub fn poincare_value(v1: &[f64], v2: &[f64]) -> f64 {
    let num: f64 = v1.iter().zip(v2).map(|(a, b)| (a - b) * (a - b)).sum();
    let n1: f64 = v1.iter().map(|a| a * a).sum();
    let n2: f64 = v2.iter().map(|a| a * a).sum();
    let x: f64 = 1.0 + 2.0 * num / ((1.0 - n1) * (1.0 - n2));
    x.max(1.0).acosh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::seed;

    fn distance(v1: [f64; 2]) -> f64 {
        let g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 2], v1.to_vec()).unwrap());
        poincare_distance(&g, v, &[0]).unwrap().value().item()
    }

    #[test]
    fn hand_values() {
        let even = distance([0.5, 0.5]);
        let confident = distance([0.8, 0.2]);
        assert!((even - 9.90).abs() < 0.01, "{even}");
        assert!((confident - 8.52).abs() < 0.01, "{confident}");
        assert!(confident < even);
        assert!((even - poincare_value(&[0.5, 0.5], &[POINCARE_BOUND, 0.0])).abs() < 1e-9);
    }

    #[test]
    fn coincident_points_give_zero() {
        assert_eq!(distance([POINCARE_BOUND, 0.0]), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = gradcheck::expr(|g, v| Ok(poincare_loss(g, v[0], &[2, 0, 1])?.sum()));
        for i in 0..20 {
            let logits = Tensor::randn(&[3, 4], 1.0, &mut seed::rng(seed::derive_indexed(7, "poincare", i)));
            let err = gradcheck::check(&[logits], 1e-4, &f).unwrap();
            assert!(err < 1e-5, "instance {i}: {err}");
        }
    }

    #[test]
    fn rejects_bad_class() {
        let g = Graph::<f32>::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(poincare_loss(&g, logits, &[3]).is_err());
        assert!(poincare_loss(&g, logits, &[0, 1]).is_err());
    }

    #[test]
    fn small_loss_implies_target_argmax() {
        // drive random logits toward each class by gradient descent
        for trial in 0..10u64 {
            let mut logits = Tensor::<f64>::randn(&[1, 5], 2.0, &mut seed::rng(trial));
            let c = (trial % 5) as usize;
            let mut loss = f64::INFINITY;
            for _ in 0..5000 {
                let g = Graph::new();
                let x = g.leaf(logits.clone(), true);
                let l = poincare_loss(&g, x, &[c]).unwrap().sum();
                loss = l.value().item();
                if loss < 0.05 {
                    break;
                }
                let grad = g.backward(l).unwrap().wrt(x);
                for (v, d) in logits.data_mut().iter_mut().zip(grad.data()) {
                    *v -= 0.5 * d;
                }
            }
            assert!(loss < 0.05, "trial {trial} stalled at {loss}");
            let row = logits.row(0);
            let best = (0..5).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            assert_eq!(best, c);
        }
    }
}

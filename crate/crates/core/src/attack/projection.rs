use crate::tensor::Real;

/// Euclidean projection of `x` onto `{y : ‖y − center‖₁ ≤ r}`, in place.
///
/// Sort-based simplex thresholding: the magnitudes of `x − center` are
/// soft-thresholded by the unique θ that puts the result on the sphere.
/// A non-positive radius collapses `x` onto the centre.
pub fn project_l1_ball<T: Real>(x: &mut [T], center: &[T], r: f64) {
    assert_eq!(x.len(), center.len(), "projection operands differ in length");
    let diff: Vec<f64> = x.iter().zip(center).map(|(&a, &c)| a.to_f64() - c.to_f64()).collect();
    let norm: f64 = diff.iter().map(|d| d.abs()).sum();
    if norm <= r {
        return;
    }
    if r <= 0.0 {
        x.copy_from_slice(center);
        return;
    }
    let theta = threshold(&diff, r);
    for ((xi, &ci), &d) in x.iter_mut().zip(center).zip(&diff) {
        let mag = (d.abs() - theta).max(0.0);
        *xi = T::of(ci.to_f64() + d.signum() * mag);
    }
}

fn threshold(diff: &[f64], r: f64) -> f64 {
    let mut u: Vec<f64> = diff.iter().map(|d| d.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - r) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// `‖x − center‖₁` accumulated in f64.
pub fn l1_distance<T: Real>(x: &[T], center: &[T]) -> f64 {
    x.iter().zip(center).map(|(&a, &c)| (a.to_f64() - c.to_f64()).abs()).sum()
}

//! Attack accuracy, nearest-feature distance, Fréchet distance and
//! precision/recall/density/coverage.
//!
//! Every function takes plain feature or logit matrices (`[N, D]`) so the
//! metrics stay independent of the models that produced them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Added to both covariance diagonals before the matrix square root.
pub const FID_RIDGE: f64 = 1e-6;
/// Shrinkage toward the scaled identity when a set has no more samples
/// than dimensions.
pub const FID_SHRINKAGE: f64 = 0.1;
pub const DEFAULT_PRDC_K: usize = 3;

fn rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape("metrics", format!("{what} must be [N, D], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Fraction of rows whose target class is among the `k` largest logits.
/// Equal logits rank the lower class index first.
pub fn acc_at_k<T: Real>(logits: &Tensor<T>, targets: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = rows(logits, "logits")?;
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={classes}")));
    }
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} rows", targets.len())));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (row, &t) in logits.data().chunks(classes).zip(targets) {
        if t >= classes {
            return Err(Error::invalid(format!("target class {t} outside 0..{classes}")));
        }
        let ahead = row.iter().enumerate().filter(|&(j, &v)| v > row[t] || (v == row[t] && j < t)).count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2)).sum()
}

/// How nearest distances are averaged in [`feature_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Mean over reconstructions of each one's nearest same-class distance.
    #[default]
    PerSample,
    /// Mean over classes of the smallest such distance within the class.
    PerClassMin,
}

/// Nearest l2 distance from each reconstruction feature to a private
/// feature of the same class, averaged per `mode`.
pub fn feature_distance<T: Real>(
    recon: &Tensor<T>,
    recon_classes: &[usize],
    private: &Tensor<T>,
    private_labels: &[usize],
    mode: DistanceMode,
) -> Result<f64> {
    let (n, d) = rows(recon, "reconstruction features")?;
    let (m, d2) = rows(private, "private features")?;
    if d != d2 || recon_classes.len() != n || private_labels.len() != m {
        return Err(Error::shape("feature_distance", format!("[{n}, {d}] x{} vs [{m}, {d2}] x{}", recon_classes.len(), private_labels.len())));
    }
    if n == 0 {
        return Err(Error::invalid("no reconstructions to score"));
    }
    let mut per_class: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
    let mut total = 0.0;
    for (i, &c) in recon_classes.iter().enumerate() {
        let best = (0..m)
            .filter(|&j| private_labels[j] == c)
            .map(|j| sq_dist(recon.row(i), private.row(j)))
            .fold(f64::INFINITY, f64::min);
        if best.is_infinite() {
            return Err(Error::invalid(format!("class {c} has no private samples")));
        }
        let dist = best.sqrt();
        total += dist;
        let e = per_class.entry(c).or_insert((f64::INFINITY, 0.0, 0));
        e.0 = e.0.min(dist);
        e.1 += dist;
        e.2 += 1;
    }
    Ok(match mode {
        DistanceMode::PerSample => total / n as f64,
        DistanceMode::PerClassMin => per_class.values().map(|e| e.0).sum::<f64>() / per_class.len() as f64,
    })
}

fn moments<T: Real>(x: &Tensor<T>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = rows(x, "features")?;
    if n < 2 {
        return Err(Error::invalid(format!("FID needs at least 2 samples per set, got {n}")));
    }
    let data = DMatrix::from_row_iterator(n, d, x.data().iter().map(|&v| v.to_f64()));
    let mean = data.row_mean().transpose();
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if n <= d {
        let iso = cov.trace() / d as f64;
        cov *= 1.0 - FID_SHRINKAGE;
        for i in 0..d {
            cov[(i, i)] += FID_SHRINKAGE * iso;
        }
    }
    for i in 0..d {
        cov[(i, i)] += FID_RIDGE;
    }
    Ok((mean, cov))
}

/// Symmetric PSD square root through an eigendecomposition with negative
/// eigenvalues clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// `Tr((CA CB)^{1/2})` is evaluated as `Tr((CA^{1/2} CB CA^{1/2})^{1/2})`,
/// whose argument is symmetric PSD.
pub fn fid<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (_, da) = rows(a, "features A")?;
    let (_, db) = rows(b, "features B")?;
    if da != db {
        return Err(Error::shape("fid", format!("feature widths {da} and {db}")));
    }
    let (mu_a, ca) = moments(a)?;
    let (mu_b, cb) = moments(b)?;
    Ok(fid_from_moments(&mu_a, &ca, &mu_b, &cb))
}

pub fn fid_from_moments(mu_a: &DVector<f64>, ca: &DMatrix<f64>, mu_b: &DVector<f64>, cb: &DMatrix<f64>) -> f64 {
    let root_a = sqrtm_psd(ca);
    let inner = &root_a * cb * &root_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_cross).max(0.0)
}

/// Precision, recall, density and coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn pairwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..a.batch()).map(|i| (0..b.batch()).map(|j| sq_dist(a.row(i), b.row(j)).sqrt()).collect()).collect()
}

/// Distance from each point to its `k`-th nearest neighbour in the same set,
/// not counting itself.
fn knn_radii(self_dist: &[Vec<f64>], k: usize) -> Vec<f64> {
    self_dist
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect();
            others.sort_by(f64::total_cmp);
            others[k - 1]
        })
        .collect()
}

/// k-NN manifold estimates. A point lies inside a ball when its distance
/// to the centre is strictly below the radius.
pub fn prdc<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, k: usize) -> Result<Prdc> {
    let (nr, dr) = rows(real, "real features")?;
    let (nf, df) = rows(fake, "fake features")?;
    if dr != df {
        return Err(Error::shape("prdc", format!("feature widths {dr} and {df}")));
    }
    if k == 0 || k >= nr || k >= nf {
        return Err(Error::invalid(format!("k = {k} needs 0 < k < set size (real {nr}, fake {nf})")));
    }
    let real_r = knn_radii(&pairwise(real, real), k);
    let fake_r = knn_radii(&pairwise(fake, fake), k);
    let rf = pairwise(real, fake);

    let precision = (0..nf).filter(|&j| (0..nr).any(|i| rf[i][j] < real_r[i])).count() as f64 / nf as f64;
    let recall = (0..nr).filter(|&i| (0..nf).any(|j| rf[i][j] < fake_r[j])).count() as f64 / nr as f64;
    let inside: usize = (0..nf).map(|j| (0..nr).filter(|&i| rf[i][j] < real_r[i]).count()).sum();
    let density = inside as f64 / (k * nf) as f64;
    let coverage = (0..nr).filter(|&i| (0..nf).any(|j| rf[i][j] < real_r[i])).count() as f64 / nr as f64;
    Ok(Prdc { precision, recall, density, coverage })
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc1: f64,
    pub acc5: f64,
    pub delta_eval: f64,
    pub delta_indep: f64,
    pub fid: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub density: Option<f64>,
    pub coverage: Option<f64>,
}

impl MetricsReport {
    /// Checks range invariants and rejects non-finite entries.
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("acc1", Some(self.acc1)),
            ("acc5", Some(self.acc5)),
            ("delta_eval", Some(self.delta_eval)),
            ("delta_indep", Some(self.delta_indep)),
            ("fid", Some(self.fid)),
            ("precision", self.precision),
            ("recall", self.recall),
            ("density", self.density),
            ("coverage", self.coverage),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !v.is_finite() || v < -1e-6 {
                    return Err(Error::invalid(format!("{name} = {v}")));
                }
            }
        }
        for (name, v) in [("acc1", Some(self.acc1)), ("acc5", Some(self.acc5)), ("precision", self.precision), ("recall", self.recall), ("coverage", self.coverage)] {
            if v.is_some_and(|v| v > 1.0) {
                return Err(Error::invalid(format!("{name} exceeds 1")));
            }
        }
        if self.acc1 > self.acc5 {
            return Err(Error::invalid("acc1 exceeds acc5"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn acc_at_full_k_is_one() {
        let logits = Tensor::<f64>::randn(&[7, 5], 1.0, &mut seed::rng(1));
        assert_eq!(acc_at_k(&logits, &[0, 1, 2, 3, 4, 0, 1], 5).unwrap(), 1.0);
        assert!(acc_at_k(&logits, &[0; 7], 6).is_err());
    }

    #[test]
    fn acc_half_batch() {
        let logits = mat(&[&[2.0, 1.0, 0.0], &[0.0, 3.0, 1.0], &[1.0, 0.0, 5.0], &[0.0, 1.0, 2.0]]);
        // rows 0 and 1 rank their target first, rows 2 and 3 do not
        assert_eq!(acc_at_k(&logits, &[0, 1, 0, 0], 1).unwrap(), 0.5);
        assert_eq!(acc_at_k(&logits, &[0, 1, 0, 0], 2).unwrap(), 0.75);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let logits = mat(&[&[1.0, 1.0]]);
        assert_eq!(acc_at_k(&logits, &[0], 1).unwrap(), 1.0);
        assert_eq!(acc_at_k(&logits, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn feature_distance_hand_case() {
        let recon = mat(&[&[1.0, 0.0]]);
        let private = mat(&[&[0.0, 0.0], &[3.0, 0.0], &[1.0, 0.0]]);
        // the exact match belongs to another class
        let d = feature_distance(&recon, &[0], &private, &[0, 0, 1], DistanceMode::PerSample).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn feature_distance_names_missing_class() {
        let recon = mat(&[&[1.0, 0.0]]);
        let err = feature_distance(&recon, &[4], &recon, &[0], DistanceMode::PerSample).unwrap_err();
        assert!(err.to_string().contains("class 4"));
    }

    #[test]
    fn feature_distance_of_subset_is_zero() {
        let private = Tensor::<f64>::randn(&[6, 3], 1.0, &mut seed::rng(2));
        let labels = [0, 1, 2, 0, 1, 2];
        let recon = private.select_rows(&[4, 0]);
        for mode in [DistanceMode::PerSample, DistanceMode::PerClassMin] {
            assert_eq!(feature_distance(&recon, &[1, 0], &private, &labels, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn per_class_min_takes_best_sample_per_class() {
        let private = mat(&[&[0.0], &[10.0]]);
        let recon = mat(&[&[1.0], &[3.0], &[14.0]]);
        let d = feature_distance(&recon, &[0, 0, 1], &private, &[0, 1], DistanceMode::PerClassMin).unwrap();
        assert_eq!(d, (1.0 + 4.0) / 2.0);
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let a = Tensor::<f64>::randn(&[200, 8], 1.0, &mut seed::rng(3));
        assert!(fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn fid_needs_two_samples() {
        let a = Tensor::<f64>::zeros(&[1, 3]);
        assert!(fid(&a, &a).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let x = DMatrix::<f64>::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let spd = &x * x.transpose() + DMatrix::identity(5, 5);
        let r = sqrtm_psd(&spd);
        assert!((&r * &r - &spd).abs().max() < 1e-10);
    }

    #[test]
    fn prdc_identical_sets() {
        let a = Tensor::<f64>::randn(&[30, 4], 1.0, &mut seed::rng(4));
        let p = prdc(&a, &a, 3).unwrap();
        assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
    }

    #[test]
    fn prdc_far_fakes() {
        let real = Tensor::<f64>::randn(&[30, 4], 1.0, &mut seed::rng(5));
        let fake = Tensor::<f64>::full(&[10, 4], 1e3);
        let p = prdc(&real, &fake, 3).unwrap();
        assert_eq!((p.precision, p.coverage, p.density), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prdc_rejects_large_k() {
        let a = Tensor::<f64>::zeros(&[3, 2]);
        assert!(prdc(&a, &a, 3).is_err());
    }

    #[test]
    fn report_validation() {
        let mut r = MetricsReport {
            acc1: 0.4,
            acc5: 0.9,
            delta_eval: 1.0,
            delta_indep: 2.0,
            fid: 3.0,
            precision: Some(0.5),
            recall: Some(0.5),
            density: Some(1.2),
            coverage: Some(0.5),
        };
        assert!(r.validate().is_ok());
        r.acc1 = 0.95;
        assert!(r.validate().is_err());
        r.acc1 = 0.4;
        r.fid = f64::NAN;
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn metrics_ignore_sample_order(seed_a in 0u64..1000, shift in 1usize..20) {
            let a = Tensor::<f64>::randn(&[20, 3], 1.0, &mut seed::rng(seed_a));
            let b = Tensor::<f64>::randn(&[20, 3], 1.0, &mut seed::rng(seed_a + 1)).map(|v| v + 0.5);
            let perm: Vec<usize> = (0..20).map(|i| (i + shift) % 20).collect();
            let (pa, pb) = (a.select_rows(&perm), b.select_rows(&perm));
            prop_assert!((fid(&a, &b).unwrap() - fid(&pa, &pb).unwrap()).abs() < 1e-9);
            prop_assert_eq!(prdc(&a, &b, 3).unwrap(), prdc(&pa, &pb, 3).unwrap());
            let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
            let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let d = feature_distance(&a, &labels, &b, &labels, DistanceMode::PerSample).unwrap();
            let pd = feature_distance(&pa, &plabels, &pb, &plabels, DistanceMode::PerSample).unwrap();
            prop_assert!((d - pd).abs() < 1e-12);
            let logits = a.clone();
            let t: Vec<usize> = (0..20).map(|i| i % 3).collect();
            let pt: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
            prop_assert_eq!(acc_at_k(&logits, &t, 1).unwrap(), acc_at_k(&pa, &pt, 1).unwrap());
        }

        #[test]
        fn fid_symmetric_and_nonnegative(s in 0u64..1000) {
            let a = Tensor::<f64>::randn(&[40, 5], 1.0, &mut seed::rng(s));
            let b = Tensor::<f64>::randn(&[30, 5], 2.0, &mut seed::rng(s + 7));
            let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6);
        }

        #[test]
        fn prdc_ranges(s in 0u64..1000, k in 1usize..5) {
            let a = Tensor::<f64>::randn(&[15, 3], 1.0, &mut seed::rng(s));
            let b = Tensor::<f64>::randn(&[12, 3], 1.5, &mut seed::rng(s + 3));
            let p = prdc(&a, &b, k).unwrap();
            for v in [p.precision, p.recall, p.coverage] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(p.density >= 0.0);
        }

        #[test]
        fn acc5_dominates_acc1(s in 0u64..1000) {
            let logits = Tensor::<f64>::randn(&[16, 8], 1.0, &mut seed::rng(s));
            let t: Vec<usize> = (0..16).map(|i| (i * 5) % 8).collect();
            prop_assert!(acc_at_k(&logits, &t, 1).unwrap() <= acc_at_k(&logits, &t, 5).unwrap());
        }

        #[test]
        fn feature_distance_nonnegative(s in 0u64..1000) {
            let a = Tensor::<f64>::randn(&[6, 3], 1.0, &mut seed::rng(s));
            let b = Tensor::<f64>::randn(&[9, 3], 1.0, &mut seed::rng(s + 1));
            let d = feature_distance(&a, &[0, 1, 2, 0, 1, 2], &b, &[0, 1, 2, 0, 1, 2, 0, 1, 2], DistanceMode::PerSample).unwrap();
            prop_assert!(d > 0.0);
        }
    }
}

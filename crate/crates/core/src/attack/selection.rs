use serde::{Deserialize, Serialize};

use super::LogitModel;
use crate::augment::{self, AugParams};
use crate::data::IMAGE_LEN;
use crate::error::{Error, Result};
use crate::models::Generator;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// What "confidence" means when scoring augmented views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    /// Softmax probability of the target class.
    #[default]
    Softmax,
    /// Raw target-class logit.
    Logit,
}

/// How the reported image is picked among a candidate's stage snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalSelection {
    /// The output of the last stage.
    Last,
    /// The snapshot with the highest robust confidence.
    #[default]
    BestConfidence,
}

impl FinalSelection {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "last" => Ok(FinalSelection::Last),
            "best-confidence" => Ok(FinalSelection::BestConfidence),
            other => Err(Error::invalid(format!("unknown final-selection strategy {other:?}"))),
        }
    }
}

/// The augmentation views shared by every image scored under `seed`.
pub fn views(n_aug: usize, aug_seed: u64) -> Vec<AugParams> {
    (0..n_aug as u64).map(|v| AugParams::from_seed(seed::derive_indexed(aug_seed, "view", v))).collect()
}

/// Mean target-class confidence of each image over the given views.
pub fn robust_confidence_with<T: Real, M: LogitModel<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    class: usize,
    views: &[AugParams],
    mode: ConfidenceMode,
) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::invalid("robust confidence needs at least one view"));
    }
    if class >= model.classes() {
        return Err(Error::invalid(format!("class {class} outside 0..{}", model.classes())));
    }
    let n = images.batch();
    let mut shape = images.shape().to_vec();
    shape[0] = n * views.len();
    let mut batch = Tensor::zeros(&shape);
    for (i, src) in images.data().chunks(IMAGE_LEN).enumerate() {
        for (v, &p) in views.iter().enumerate() {
            let at = (i * views.len() + v) * IMAGE_LEN;
            augment::apply_into(src, p, &mut batch.data_mut()[at..at + IMAGE_LEN]);
        }
    }
    let logits = model.logits(&batch)?;
    let k = model.classes();
    let mut scores = vec![0.0; n];
    for (j, row) in logits.data().chunks(k).enumerate() {
        let s = match mode {
            ConfidenceMode::Logit => row[class].to_f64(),
            ConfidenceMode::Softmax => {
                let m = row.iter().map(|&v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v.to_f64() - m).exp()).sum();
                (row[class].to_f64() - m).exp() / z
            }
        };
        scores[j / views.len()] += s;
    }
    scores.iter_mut().for_each(|s| *s /= views.len() as f64);
    Ok(scores)
}

pub fn robust_confidence<T: Real, M: LogitModel<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    class: usize,
    n_aug: usize,
    aug_seed: u64,
    mode: ConfidenceMode,
) -> Result<Vec<f64>> {
    robust_confidence_with(model, images, class, &views(n_aug, aug_seed), mode)
}

/// Indices of the `k` highest scores, best first; equal scores keep the
/// lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
pub struct InitialSelection {
    /// Selected styles, `[select, 64]`, best first.
    pub w: Tensor<f32>,
    /// Candidate indices of the selected styles.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub candidate_scores: Vec<f64>,
}

/// Samples `candidates` latents, maps them to styles and keeps the
/// `select` styles whose renders score highest for `class`.
#[allow(clippy::too_many_arguments)]
pub fn initial_select<M: LogitModel<f32> + ?Sized>(
    gen: &Generator<f32>,
    model: &M,
    class: usize,
    candidates: usize,
    select: usize,
    n_aug: usize,
    mode: ConfidenceMode,
    seed_: u64,
) -> Result<InitialSelection> {
    if select > candidates {
        return Err(Error::invalid(format!("select count {select} exceeds candidate count {candidates}")));
    }
    let z = Generator::<f32>::sample_z(candidates, &mut seed::rng(seed::derive(seed_, "initial-z")));
    let w = gen.map_latent(&z)?;
    let images = gen.synthesize(&w)?;
    let candidate_scores = robust_confidence(model, &images, class, n_aug, seed::derive(seed_, "initial-aug"), mode)?;
    let indices = top_k(&candidate_scores, select);
    Ok(InitialSelection {
        w: w.select_rows(&indices),
        scores: indices.iter().map(|&i| candidate_scores[i]).collect(),
        indices,
        candidate_scores,
    })
}

/// Picks one snapshot per candidate. `confidences[s][j]` is the robust
/// confidence of candidate `j`'s snapshot after stage `s`.
pub fn choose_stages(confidences: &[Vec<f64>], strategy: FinalSelection) -> Result<Vec<usize>> {
    let stages = confidences.len();
    if stages == 0 {
        return Err(Error::invalid("no snapshots to select from"));
    }
    let n = confidences[0].len();
    Ok((0..n)
        .map(|j| match strategy {
            FinalSelection::Last => stages - 1,
            FinalSelection::BestConfidence => {
                (0..stages).fold(0, |best, s| if confidences[s][j] > confidences[best][j] { s } else { best })
            }
        })
        .collect())
}

/// Chooses each candidate's final image among its stage snapshots.
/// Returns the images, the chosen stage per candidate and every snapshot's
/// confidence.
pub fn select_final<M: LogitModel<f32> + ?Sized>(
    snapshots: &[Tensor<f32>],
    model: &M,
    class: usize,
    strategy: FinalSelection,
    views: &[AugParams],
    mode: ConfidenceMode,
) -> Result<(Tensor<f32>, Vec<usize>, Vec<Vec<f64>>)> {
    let confidences = snapshots
        .iter()
        .map(|s| robust_confidence_with(model, s, class, views, mode))
        .collect::<Result<Vec<_>>>()?;
    let chosen = choose_stages(&confidences, strategy)?;
    Ok((gather(snapshots, &chosen)?, chosen, confidences))
}

/// Row `j` of the result is row `j` of `snapshots[chosen[j]]`.
pub fn gather(snapshots: &[Tensor<f32>], chosen: &[usize]) -> Result<Tensor<f32>> {
    let first = snapshots.first().ok_or_else(|| Error::invalid("no snapshots"))?;
    let mut out = Tensor::zeros(first.shape());
    for (j, &s) in chosen.iter().enumerate() {
        out.row_mut(j).copy_from_slice(snapshots[s].row(j));
    }
    Ok(out)
}

//! Measurement instruments: cosine-similarity heatmaps, the contrast score,
//! spectral reports of the SOMAML preconditioner, and few-shot evaluation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::episodes::{Episode, OverfitSet};
use crate::error::{contract, Error, Result};
use crate::meta::{adapt, LabeledFeatures, LinearHead, MetaModel};
use crate::numerics::{argmax, norm, softmax_unchecked, symmetric_eig, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Support,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupLabel {
    pub set: SetKind,
    pub class: usize,
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set = match self.set {
            SetKind::Support => "support",
            SetKind::Query => "query",
        };
        write!(f, "{set}:{}", self.class)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureGroup {
    pub label: GroupLabel,
    pub features: Vec<Vector>,
}

/// Group-averaged pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHeatmap {
    pub labels: Vec<GroupLabel>,
    pub matrix: Vec<Vec<f64>>,
}

/// Entry `(a, b)` is the mean cosine similarity over all pairs drawn from
/// groups `a` and `b`; within a group, self-pairs are excluded (a singleton
/// group gets 1 on its diagonal).
pub fn similarity_heatmap(groups: &[FeatureGroup]) -> Result<SimilarityHeatmap> {
    if groups.is_empty() {
        return Err(contract("heatmap needs at least one group"));
    }
    for g in groups {
        if g.features.is_empty() {
            return Err(contract(format!("group {} is empty", g.label)));
        }
        if g.features.iter().any(|f| norm(f) == 0.0) {
            return Err(Error::Degenerate(format!("zero-norm feature in group {}", g.label)));
        }
    }
    // normalise once; cosine of unit vectors is the dot product
    let units: Vec<Vec<Vector>> = groups
        .iter()
        .map(|g| {
            g.features
                .iter()
                .map(|f| {
                    let n = norm(f);
                    f.iter().map(|v| v / n).collect()
                })
                .collect()
        })
        .collect();
    let n = groups.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a..n {
            let (mut sum, mut count) = (0.0, 0usize);
            for (i, x) in units[a].iter().enumerate() {
                for (j, y) in units[b].iter().enumerate() {
                    if a == b && i == j {
                        continue;
                    }
                    sum += crate::numerics::dot(x, y).clamp(-1.0, 1.0);
                    count += 1;
                }
            }
            let v = if count == 0 { 1.0 } else { sum / count as f64 };
            matrix[a][b] = v;
            matrix[b][a] = v;
        }
    }
    Ok(SimilarityHeatmap { labels: groups.iter().map(|g| g.label).collect(), matrix })
}

/// Mean over same-class entries (including support-vs-query of one class)
/// minus mean over different-class entries.
pub fn contrast_score(h: &SimilarityHeatmap) -> f64 {
    let (mut same, mut n_same, mut diff, mut n_diff) = (0.0, 0usize, 0.0, 0usize);
    for (a, la) in h.labels.iter().enumerate() {
        for (b, lb) in h.labels.iter().enumerate() {
            if la.class == lb.class {
                same += h.matrix[a][b];
                n_same += 1;
            } else {
                diff += h.matrix[a][b];
                n_diff += 1;
            }
        }
    }
    if n_same == 0 || n_diff == 0 {
        return 0.0;
    }
    same / n_same as f64 - diff / n_diff as f64
}

/// Support and query features of every class in the overfit set, in the
/// order support:0.., query:0.. (class = position in the set).
pub fn overfit_groups(encoder: &EncoderParams, set: &OverfitSet) -> Result<Vec<FeatureGroup>> {
    let mut groups = Vec::with_capacity(2 * set.n_way());
    for (kind, samples) in [(SetKind::Support, &set.support), (SetKind::Query, &set.query)] {
        for (class, xs) in samples.iter().enumerate() {
            let features = xs.iter().map(|x| encoder.features(x)).collect::<Result<Vec<_>>>()?;
            groups.push(FeatureGroup { label: GroupLabel { set: kind, class }, features });
        }
    }
    Ok(groups)
}

pub fn overfit_contrast(encoder: &EncoderParams, set: &OverfitSet) -> Result<f64> {
    Ok(contrast_score(&similarity_heatmap(&overfit_groups(encoder, set)?)?))
}

/// Spectrum of `H = E_s g_{s,k,w⁰} φ(s)φ(s)ᵀ` and the per-direction
/// contraction `1 − ηλ_i` applied by the SOMAML preconditioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub channel: usize,
    pub h: Matrix,
    pub eigenvalues: Vector,
    /// Columns are unit eigenvectors, matching `eigenvalues`.
    pub eigenvectors: Matrix,
    pub eta: f64,
    pub contraction: Vector,
}

impl SpectralReport {
    /// `(I − ηH) v`.
    pub fn precondition(&self, v: &[f64]) -> Vector {
        let hv = self.h.matvec(v);
        v.iter().zip(&hv).map(|(x, y)| x - self.eta * y).collect()
    }

    pub fn top_eigenvector(&self) -> Vector {
        self.eigenvectors.col(0)
    }
}

pub fn preconditioner_report(
    support: &LabeledFeatures,
    head0: &LinearHead,
    channel: usize,
    eta: f64,
) -> Result<SpectralReport> {
    support.check(head0.feature_dim(), head0.n_way(), "support")?;
    if channel >= head0.n_way() {
        return Err(contract(format!("channel {channel} outside 0..{}", head0.n_way())));
    }
    let n_f = head0.feature_dim();
    let inv = 1.0 / support.len() as f64;
    let mut h = Matrix::zeros(n_f, n_f);
    for f in &support.features {
        let g = softmax_unchecked(&head0.logits_unchecked(f));
        h.add_outer(inv * g[channel], f, f);
    }
    let eig = symmetric_eig(&h)?;
    let contraction = eig.values.iter().map(|l| 1.0 - eta * l).collect();
    Ok(SpectralReport { channel, h, eigenvalues: eig.values, eigenvectors: eig.vectors, eta, contraction })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_episode: Vec<f64>,
    /// Total number of classified query samples.
    pub n_predictions: usize,
}

impl EvalResult {
    /// Binomial standard error `√(p(1−p)/n)` over all query predictions.
    pub fn std_error(&self) -> f64 {
        let p = self.accuracy;
        (p * (1.0 - p) / self.n_predictions.max(1) as f64).sqrt()
    }
}

fn episode_accuracy(model: &MetaModel, episode: &Episode, steps: usize, eta: f64, zero_head_first: bool) -> Result<f64> {
    let mut head0 = model.head.clone();
    if zero_head_first {
        head0.w.fill(0.0);
    }
    let support = model.features(&episode.support)?;
    let adapted = adapt(&head0, &support, steps, eta)?;
    let mut correct = 0usize;
    for (x, y) in &episode.query {
        let f = model.encoder.features(x)?;
        correct += usize::from(argmax(&adapted.head.logits_unchecked(&f)) == *y);
    }
    Ok(correct as f64 / episode.query.len().max(1) as f64)
}

/// Adapts a copy of the head on each episode's support set and scores the
/// query set by argmax logit. The model itself is never modified.
pub fn evaluate(
    model: &MetaModel,
    episodes: &[Episode],
    steps: usize,
    eta: f64,
    zero_head_first: bool,
    pool: Option<&rayon::ThreadPool>,
) -> Result<EvalResult> {
    if episodes.is_empty() {
        return Err(contract("no evaluation episodes"));
    }
    let run = |e: &Episode| episode_accuracy(model, e, steps, eta, zero_head_first);
    let per_episode: Vec<f64> = match pool {
        Some(pool) => pool.install(|| episodes.par_iter().map(run).collect::<Result<Vec<_>>>())?,
        None => episodes.iter().map(run).collect::<Result<Vec<_>>>()?,
    };
    let n_predictions: usize = episodes.iter().map(|e| e.query.len()).sum();
    let correct: f64 = per_episode.iter().zip(episodes).map(|(a, e)| a * e.query.len() as f64).sum();
    Ok(EvalResult { accuracy: correct / n_predictions as f64, per_episode, n_predictions })
}

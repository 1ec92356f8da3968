//! Prototype aggregation, the metric meta loss, and episode classification.

use crate::error::{Error, Result};
use crate::nn;
use crate::tape::*;
use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

static META_LOSS_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of meta-loss evaluations so far; the two-stage trainer is expected
/// to perform exactly two per task per iteration.
pub fn meta_loss_call_count() -> u64 {
    META_LOSS_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    NegSqEuclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityMetric {
    pub kind: SimilarityKind,
    pub scale: f64,
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        SimilarityMetric { kind: SimilarityKind::NegSqEuclidean, scale: 1.0 }
    }
}

impl SimilarityMetric {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::Config("similarity scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Class prototypes: row i is the mean of the K support features labeled i.
pub struct Prototypes {
    pub vectors: Var, // (N, D)
    pub n_way: usize,
}

/// Average support features per episode-local class. Fails unless every
/// class has the same number of features.
pub fn compute_prototypes(support_features: &Var, support_labels: &[usize]) -> Result<Prototypes> {
    let nk = support_features.shape()[0];
    if nk != support_labels.len() {
        return Err(Error::Data("prototypes: label count mismatch".into()));
    }
    let n_way = support_labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut counts = vec![0usize; n_way];
    for &l in support_labels {
        counts[l] += 1;
    }
    let k = counts[0];
    if k == 0 || counts.iter().any(|&c| c != k) {
        return Err(Error::Data(format!(
            "prototypes: classes must all have K features, got {counts:?}"
        )));
    }
    // (N, N*K) averaging matrix
    let mut a = Array2::<f64>::zeros((n_way, nk));
    for (j, &l) in support_labels.iter().enumerate() {
        a[[l, j]] = 1.0 / k as f64;
    }
    let vectors = matmul(&Var::constant(a.into_dyn()), support_features);
    Ok(Prototypes { vectors, n_way })
}

/// (M, N) similarity matrix between query rows and prototype rows.
pub fn similarity_matrix(queries: &Var, protos: &Prototypes, sim: &SimilarityMetric) -> Var {
    let n = protos.n_way;
    let m = queries.shape()[0];
    match sim.kind {
        SimilarityKind::NegSqEuclidean => {
            // -(|q|^2 - 2 q.h + |h|^2)
            let qh = matmul(queries, &transpose2(&protos.vectors)); // (M, N)
            let qn = broadcast_cols(&sum_rows(&mul(queries, queries)), n);
            let hn = broadcast_rows(
                &transpose2(&sum_rows(&mul(&protos.vectors, &protos.vectors))),
                m,
            );
            scale(&sub(&scale(&qh, 2.0), &add(&qn, &hn)), sim.scale)
        }
        SimilarityKind::Cosine => {
            let qn = nn::normalize_rows(queries, 1e-12);
            let hn = nn::normalize_rows(&protos.vectors, 1e-12);
            scale(&matmul(&qn, &transpose2(&hn)), sim.scale)
        }
    }
}

/// Mean cross-entropy between query labels and the softmax over
/// query-prototype similarities.
pub fn meta_loss(
    query_features: &Var,
    query_labels: &[usize],
    protos: &Prototypes,
    sim: &SimilarityMetric,
) -> Result<Var> {
    META_LOSS_CALLS.fetch_add(1, Ordering::Relaxed);
    if query_features.array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("meta_loss: non-finite query features".into()));
    }
    if protos.vectors.array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("meta_loss: non-finite prototypes".into()));
    }
    if let Some(&bad) = query_labels.iter().find(|&&l| l >= protos.n_way) {
        return Err(Error::Data(format!("meta_loss: label {bad} out of range")));
    }
    let sims = similarity_matrix(query_features, protos, sim);
    Ok(nn::cross_entropy_mean(&sims, query_labels))
}

/// Argmax classification over prototype similarities; ties break toward the
/// lowest class index. Returns predictions and the raw score matrix.
pub fn classify(
    query_features: &Var,
    protos: &Prototypes,
    sim: &SimilarityMetric,
) -> (Vec<usize>, Array2<f64>) {
    let sims = similarity_matrix(query_features, protos, sim);
    let scores = sims
        .array()
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let preds = scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    (preds, scores)
}

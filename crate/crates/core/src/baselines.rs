//! Pointwise additive scores used as comparison baselines.

use crate::error::{Error, Result};
use crate::retrieval::RankedList;
use crate::store::{dot, FeatureStore, QueryVector};

/// Gradient dot product `phi_x' q` for every row.
pub fn grad_dot(store: &FeatureStore, q: &QueryVector) -> Result<RankedList> {
    q.check_dim(store)?;
    let scored = store
        .ids()
        .iter()
        .zip(store.rows())
        .map(|(&id, phi)| (id, dot(phi, q.as_slice())))
        .collect();
    Ok(RankedList::from_scores(scored))
}

/// Cosine similarity between representation rows and the query.
pub fn rep_sim(repstore: &FeatureStore, q: &QueryVector) -> Result<RankedList> {
    q.check_dim(repstore)?;
    let qn = q.norm_squared().sqrt();
    if qn == 0.0 {
        return Err(Error::ZeroPriorVariance);
    }
    let mut scored = Vec::with_capacity(repstore.n());
    for (&id, row) in repstore.ids().iter().zip(repstore.rows()) {
        let rn = dot(row, row).sqrt();
        if rn == 0.0 {
            return Err(Error::ZeroVectorRow(id));
        }
        let c = dot(row, q.as_slice()) / (rn * qn);
        scored.push((id, c.clamp(-1.0, 1.0)));
    }
    Ok(RankedList::from_scores(scored))
}

/// Elementwise mean of per-query score vectors.
pub fn additive_aggregate(per_query: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_query.first().ok_or(Error::EmptyInput)?;
    let n = first.len();
    let mut out = vec![0.0; n];
    for (row, scores) in per_query.iter().enumerate() {
        if scores.len() != n {
            return Err(Error::DimensionMismatch {
                row,
                expected: n,
                found: scores.len(),
            });
        }
        for (o, s) in out.iter_mut().zip(scores) {
            *o += s;
        }
    }
    let m = per_query.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    Ok(out)
}

/// Top-`m` ids by aggregated score (ties to the lowest id).
pub fn top_m_by_aggregate(ids: &[u64], scores: &[f64], m: usize) -> Vec<u64> {
    let list = RankedList::from_scores(ids.iter().copied().zip(scores.iter().copied()).collect());
    list.truncated(m).ids().to_vec()
}

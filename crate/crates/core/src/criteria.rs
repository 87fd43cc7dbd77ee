//! Subset-level information scores, in nats.
//!
//! * information gain `I_IG(S) = -1/2 log(v_*(S) / k_**)`: uncertainty removed
//!   at the query by training on `S` alone;
//! * information loss `I_IL(S) = 1/2 log(v_*(D \ S) / v_*(D))`: uncertainty
//!   added at the query by withholding `S`.
//!
//! Both are computed from the explained (or restored) part of the variance
//! with `ln_1p`, so the tiny scores of the high-noise regime keep their
//! relative precision.

use crate::error::{Error, Result};
use crate::gp::{ConditioningSet, NoiseModel, Surrogate};
use crate::retrieval::RankedList;
use crate::store::{dot, FeatureStore, QueryVector};

/// Below this a reference score cannot normalize a relative-information ratio.
pub const REFERENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NatsScore(pub f64);

impl NatsScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn prior_variance(q: &QueryVector) -> Result<f64> {
    let k = q.norm_squared();
    if k > 0.0 {
        Ok(k)
    } else {
        Err(Error::ZeroPriorVariance)
    }
}

/// `-1/2 log(1 - explained / prior)`.
fn nats_from_explained(explained: f64, prior: f64) -> Result<NatsScore> {
    let v = -0.5 * (-explained / prior).ln_1p();
    if v.is_finite() {
        Ok(NatsScore(v))
    } else {
        Err(Error::NegativeVariance(prior - explained))
    }
}

pub fn info_gain_with(gp: &Surrogate<'_>, s: &ConditioningSet, q: &QueryVector) -> Result<NatsScore> {
    let prior = prior_variance(q)?;
    q_dim(gp, q)?;
    if s.is_empty() {
        return Ok(NatsScore(0.0));
    }
    let explained = gp.explained_covariance(s, q.as_slice(), q.as_slice())?;
    nats_from_explained(explained, prior)
}

pub fn info_loss_with(gp: &Surrogate<'_>, s: &ConditioningSet, q: &QueryVector) -> Result<NatsScore> {
    q_dim(gp, q)?;
    if s.is_empty() {
        return Ok(NatsScore(0.0));
    }
    let store = gp.store();
    let everything = ConditioningSet::all(store);
    if s.len() == store.n() {
        // Nothing retained: the withheld posterior is the prior exactly.
        s.positions(store)?;
        return info_gain_with(gp, &everything, q);
    }
    let full = gp.posterior_variance(&everything, q)?;
    if full <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let restored = gp.leave_m_out_increment(s, q)?;
    Ok(NatsScore(0.5 * (restored / full).ln_1p()))
}

fn q_dim(gp: &Surrogate<'_>, q: &QueryVector) -> Result<()> {
    if q.dim() != gp.store().k() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: gp.store().k(),
            found: q.dim(),
        });
    }
    Ok(())
}

pub fn info_gain(
    store: &FeatureStore,
    s: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<NatsScore> {
    info_gain_with(&Surrogate::new(store, noise), s, q)
}

pub fn info_loss(
    store: &FeatureStore,
    s: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<NatsScore> {
    info_loss_with(&Surrogate::new(store, noise), s, q)
}

/// Shared leading term `sum_{x in S} (phi_x' q)^2 / (2 k_** sigma2)` of both
/// criteria as `sigma2 -> infinity`.
pub fn high_noise_leading_term(
    store: &FeatureStore,
    s: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<NatsScore> {
    let prior = prior_variance(q)?;
    q.check_dim(store)?;
    let mut a = 0.0;
    for &id in s.ids() {
        let c = dot(store.row_by_id(id)?, q.as_slice());
        a += c * c;
    }
    Ok(NatsScore(a / (2.0 * prior * noise.sigma2())))
}

/// Information loss of `s_method` as a fraction of that of `s_ref`.
pub fn relative_information_with(
    gp: &Surrogate<'_>,
    s_method: &ConditioningSet,
    s_ref: &ConditioningSet,
    q: &QueryVector,
) -> Result<f64> {
    if s_method.len() != s_ref.len() {
        return Err(Error::InvalidConfig(format!(
            "relative information compares equal-size subsets, got {} and {}",
            s_method.len(),
            s_ref.len()
        )));
    }
    let reference = info_loss_with(gp, s_ref, q)?.value();
    if reference <= REFERENCE_TOL {
        return Err(Error::DegenerateReference(reference));
    }
    Ok(info_loss_with(gp, s_method, q)?.value() / reference)
}

pub fn relative_information(
    store: &FeatureStore,
    s_method: &ConditioningSet,
    s_ref: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    relative_information_with(&Surrogate::new(store, noise), s_method, s_ref, q)
}

/// `v_x,*^D / sqrt(v_*^D v_x^D)` conditioned on the whole store.
pub fn relatif_cosine_with(gp: &Surrogate<'_>, x: u64, q: &QueryVector) -> Result<f64> {
    let everything = ConditioningSet::all(gp.store());
    let cross = gp.posterior_covariance(&everything, x, q)?;
    let vq = gp.posterior_variance(&everything, q)?;
    let vx = gp.example_variance(&everything, x)?;
    if vq <= 0.0 || vx <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((cross / (vq.sqrt() * vx.sqrt())).clamp(-1.0, 1.0))
}

pub fn relatif_cosine(
    store: &FeatureStore,
    x: u64,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    relatif_cosine_with(&Surrogate::new(store, noise), x, q)
}

/// Every store row ranked by its cosine score.
pub fn relatif_ranking(store: &FeatureStore, q: &QueryVector, noise: NoiseModel) -> Result<RankedList> {
    let gp = Surrogate::new(store, noise);
    let scored = store
        .ids()
        .iter()
        .map(|&id| Ok((id, relatif_cosine_with(&gp, id, q)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_scores(scored))
}

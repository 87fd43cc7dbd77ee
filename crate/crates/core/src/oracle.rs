//! Brute-force reference computations.
//!
//! Everything here goes through dense kernel-space Gram matrices inverted by
//! full-pivot LU, a route independent of the Cholesky factors and rank-one
//! updates used by the engines. Costs are cubic or combinatorial; keep
//! instances small.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::greedy::{attribute, Criterion, GreedyConfig};
use crate::gp::{ConditioningSet, NoiseModel, Surrogate};
use crate::store::{dot, FeatureStore, QueryVector};

fn dense_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    g.clone()
        .full_piv_lu()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { attempts: 1 })
}

/// Posterior covariance of `a` and `b` given rows at `positions`.
pub fn dense_covariance(store: &FeatureStore, positions: &[usize], a: &[f64], b: &[f64], sigma2: f64) -> Result<f64> {
    let prior = dot(a, b);
    if positions.is_empty() {
        return Ok(prior);
    }
    let m = positions.len();
    let g = DMatrix::from_fn(m, m, |i, j| {
        dot(store.row(positions[i]), store.row(positions[j])) + if i == j { sigma2 } else { 0.0 }
    });
    let ka = DVector::from_iterator(m, positions.iter().map(|&p| dot(store.row(p), a)));
    let kb = DVector::from_iterator(m, positions.iter().map(|&p| dot(store.row(p), b)));
    Ok(prior - ka.dot(&(dense_inverse(&g)? * kb)))
}

pub fn dense_variance(store: &FeatureStore, positions: &[usize], q: &[f64], sigma2: f64) -> Result<f64> {
    dense_covariance(store, positions, q, q, sigma2)
}

fn complement(n: usize, removed: &[usize]) -> Vec<usize> {
    (0..n).filter(|p| !removed.contains(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    pub selected: Vec<u64>,
    /// Query variance after each step (conditioned on `A` for gains, on `D \ A` for losses).
    pub variances: Vec<f64>,
}

/// Greedy gain by re-solving `v_*^{A u {x}}` densely for every candidate.
pub fn brute_force_greedy_gain(store: &FeatureStore, q: &QueryVector, sigma2: f64, budget: usize) -> Result<OracleTrace> {
    let mut acquired: Vec<usize> = Vec::new();
    let mut trace = OracleTrace {
        selected: vec![],
        variances: vec![],
    };
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for p in 0..store.n() {
            if acquired.contains(&p) {
                continue;
            }
            let mut set = acquired.clone();
            set.push(p);
            let v = dense_variance(store, &set, q.as_slice(), sigma2)?;
            if best.is_none_or(|(bp, bv)| v < bv || (v == bv && store.id(p) < store.id(bp))) {
                best = Some((p, v));
            }
        }
        let (p, v) = best.ok_or(Error::EmptyPool)?;
        acquired.push(p);
        trace.selected.push(store.id(p));
        trace.variances.push(v);
    }
    Ok(trace)
}

/// Greedy removal by re-solving `v_*^{D \ (A u {x})}` on the retained Gram.
pub fn brute_force_greedy_loss(store: &FeatureStore, q: &QueryVector, sigma2: f64, budget: usize) -> Result<OracleTrace> {
    let mut removed: Vec<usize> = Vec::new();
    let mut trace = OracleTrace {
        selected: vec![],
        variances: vec![],
    };
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for p in 0..store.n() {
            if removed.contains(&p) {
                continue;
            }
            let mut set = removed.clone();
            set.push(p);
            let v = dense_variance(store, &complement(store.n(), &set), q.as_slice(), sigma2)?;
            if best.is_none_or(|(bp, bv)| v > bv || (v == bv && store.id(p) < store.id(bp))) {
                best = Some((p, v));
            }
        }
        let (p, v) = best.ok_or(Error::EmptyPool)?;
        removed.push(p);
        trace.selected.push(store.id(p));
        trace.variances.push(v);
    }
    Ok(trace)
}

/// `-1/2 ln(v_*(S) / k_**)` from a dense solve.
pub fn dense_info_gain(store: &FeatureStore, positions: &[usize], q: &QueryVector, sigma2: f64) -> Result<f64> {
    let prior = q.norm_squared();
    Ok(-0.5 * (dense_variance(store, positions, q.as_slice(), sigma2)? / prior).ln())
}

/// `1/2 ln(v_*(D \ S) / v_*(D))` from two dense solves.
pub fn dense_info_loss(store: &FeatureStore, positions: &[usize], q: &QueryVector, sigma2: f64) -> Result<f64> {
    let all: Vec<usize> = (0..store.n()).collect();
    let full = dense_variance(store, &all, q.as_slice(), sigma2)?;
    let kept = dense_variance(store, &complement(store.n(), positions), q.as_slice(), sigma2)?;
    Ok(0.5 * (kept / full).ln())
}

/// Best `m`-subset (by positions) of a set function, ties to the first in
/// lexicographic order.
pub fn enumerate_best<F>(n: usize, m: usize, mut f: F) -> Result<(Vec<usize>, f64)>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let mut best: Option<(Vec<usize>, f64)> = None;
    for set in (0..n).combinations(m) {
        let v = f(&set)?;
        if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((set, v));
        }
    }
    best.ok_or(Error::EmptyPool)
}

/// Every `m`-subset with its score, in lexicographic order.
pub fn enumerate_all<F>(n: usize, m: usize, mut f: F) -> Result<Vec<(Vec<usize>, f64)>>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    (0..n)
        .combinations(m)
        .map(|set| f(&set).map(|v| (set, v)))
        .collect()
}

/// Multi-query gain score of candidate `x` given acquired positions, with
/// every posterior covariance solved densely in kernel space.
pub fn dense_multi_query_score(
    store: &FeatureStore,
    acquired: &[usize],
    queries: &[QueryVector],
    x: usize,
    sigma2: f64,
    exact: bool,
) -> Result<f64> {
    let phi = store.row(x);
    let mut num = 0.0;
    for q in queries {
        let c = dense_covariance(store, acquired, phi, q.as_slice(), sigma2)?;
        num += c * c;
    }
    if exact {
        Ok(num / (sigma2 + dense_variance(store, acquired, phi, sigma2)?))
    } else {
        Ok(num)
    }
}

/// Largest eigenvalue of the Gram matrix `Phi Phi'` (equal to that of `Phi' Phi`).
pub fn gram_lambda_max(store: &FeatureStore) -> f64 {
    let k = store.k();
    let mut c = DMatrix::<f64>::zeros(k, k);
    for row in store.rows() {
        let r = DVector::from_column_slice(row);
        c += &r * r.transpose();
    }
    c.symmetric_eigenvalues().max()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub gain_picks_agree: bool,
    pub gain_max_rel_dev: f64,
    pub loss_picks_agree: bool,
    pub loss_max_rel_dev: f64,
    /// Leave-M-out identity vs retained-Gram solve over the loss prefixes.
    pub leave_out_max_rel_dev: f64,
    /// Weight-space vs kernel-space variance over the gain prefixes.
    pub woodbury_max_rel_dev: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Runs both exact engines against the brute-force oracles.
pub fn check_engines(store: &FeatureStore, q: &QueryVector, noise: NoiseModel, budget: usize) -> Result<OracleReport> {
    let sigma2 = noise.sigma2();
    let gain = attribute(store, q, &GreedyConfig::new(Criterion::InfoGainExact, budget, sigma2)?)?;
    let gain_bf = brute_force_greedy_gain(store, q, sigma2, budget)?;
    let loss = attribute(store, q, &GreedyConfig::new(Criterion::InfoLoss, budget, sigma2)?)?;
    let loss_bf = brute_force_greedy_loss(store, q, sigma2, budget)?;
    let prior = q.norm_squared();
    let gp = Surrogate::new(store, noise);

    let mut report = OracleReport {
        gain_picks_agree: gain.selected == gain_bf.selected,
        gain_max_rel_dev: 0.0,
        loss_picks_agree: loss.selected == loss_bf.selected,
        loss_max_rel_dev: 0.0,
        leave_out_max_rel_dev: 0.0,
        woodbury_max_rel_dev: 0.0,
    };
    for (m, &v) in gain_bf.variances.iter().enumerate() {
        let engine = prior * (-2.0 * gain.cumulative_nats[m]).exp();
        report.gain_max_rel_dev = report.gain_max_rel_dev.max(rel(engine, v));
        let set = ConditioningSet::new(gain.selected[..=m].to_vec())?;
        let inv = crate::gp::precision_inverse_for(store, &set, noise)?;
        let ws = inv.quad_form(q.as_slice(), q.as_slice());
        let ks = gp.posterior_variance(&set, q)?;
        report.woodbury_max_rel_dev = report.woodbury_max_rel_dev.max(rel(ws, ks));
    }
    let all: Vec<usize> = (0..store.n()).collect();
    let full = dense_variance(store, &all, q.as_slice(), sigma2)?;
    for (m, &v) in loss_bf.variances.iter().enumerate() {
        let engine = full * (2.0 * loss.cumulative_nats[m]).exp();
        report.loss_max_rel_dev = report.loss_max_rel_dev.max(rel(engine, v));
        let set = ConditioningSet::new(loss.selected[..=m].to_vec())?;
        let identity = gp.leave_m_out_variance(&set, q)?;
        let direct = dense_variance(store, &complement(store.n(), &set.positions(store)?), q.as_slice(), sigma2)?;
        report.leave_out_max_rel_dev = report.leave_out_max_rel_dev.max(rel(identity, direct));
    }
    Ok(report)
}

//! Synthetic instances: a planted-trigger backdoor set and the
//! relative-information sweep over noise levels.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::criteria::info_loss_with;
use crate::error::{Error, Result};
use crate::gp::{ConditioningSet, NoiseModel, Surrogate};
use crate::greedy::{attribute, Criterion, GreedyConfig};
use crate::oracle::gram_lambda_max;
use crate::retrieval::{GroundTruth, Rankings};
use crate::store::{FeatureStore, QueryVector};

fn gaussian_row(rng: &mut ChaCha20Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Rows with i.i.d. `N(0, 1/K)` entries, so row norms concentrate near 1.
pub fn gaussian_store(n: usize, k: usize, seed: u64) -> Result<FeatureStore> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (k as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_row(&mut rng, k, scale)).collect();
    FeatureStore::from_rows(&rows)
}

/// Rows `z_j * sqrt(j^-decay / K)` with standard-normal `z`, giving the
/// feature covariance a power-law spectrum. Returns the store and a query
/// drawn from the same distribution.
pub fn power_law_instance(n: usize, k: usize, decay: f64, seed: u64) -> Result<(FeatureStore, QueryVector)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (1..=k).map(|j| ((j as f64).powf(-decay) / k as f64).sqrt()).collect();
    let draw = |rng: &mut ChaCha20Rng| -> Vec<f64> {
        scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
    let q = QueryVector::new(draw(&mut rng))?;
    Ok((FeatureStore::from_rows(&rows)?, q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackdoorConfig {
    pub n: usize,
    pub n_poison: usize,
    pub k: usize,
    pub trigger_scale: f64,
    pub n_queries: usize,
    pub n_classes: u32,
    pub seed: u64,
}

impl Default for BackdoorConfig {
    fn default() -> Self {
        BackdoorConfig {
            n: 2000,
            n_poison: 50,
            k: 64,
            trigger_scale: 4.0,
            n_queries: 5,
            n_classes: 10,
            seed: 0,
        }
    }
}

impl BackdoorConfig {
    /// Label carried by poisoned rows and triggered queries.
    pub const TARGET_LABEL: u32 = 0;

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.n_poison == 0 || self.n_poison >= self.n {
            return bad(format!("n_poison must lie in 1..{}, got {}", self.n, self.n_poison));
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        if !(self.trigger_scale >= 0.0 && self.trigger_scale.is_finite()) {
            return bad(format!("trigger_scale must be finite and >= 0, got {}", self.trigger_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackdoorData {
    pub train: FeatureStore,
    /// Triggered test points, ids `0..n_queries`.
    pub queries: FeatureStore,
    pub truth: GroundTruth,
    pub trigger: Vec<f64>,
}

/// Clean rows are `N(0, I/K)` with uniform labels. `n_poison` rows, placed at
/// random positions, add `trigger_scale * t` for a random unit vector `t` and
/// carry the target label. Queries are fresh clean draws plus the same
/// trigger. With `trigger_scale = 0` poisoned rows are distributed exactly
/// like clean ones.
pub fn synth_backdoor(cfg: &BackdoorConfig) -> Result<BackdoorData> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let k = cfg.k;
    let scale = 1.0 / (k as f64).sqrt();
    let mut trigger = gaussian_row(&mut rng, k, 1.0);
    let norm = trigger.iter().map(|v| v * v).sum::<f64>().sqrt();
    trigger.iter_mut().for_each(|v| *v /= norm);

    let mut order: Vec<usize> = (0..cfg.n).collect();
    for i in (1..cfg.n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let poisoned: BTreeSet<usize> = order[..cfg.n_poison].iter().copied().collect();

    let mut values = Vec::with_capacity(cfg.n * k);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut row = gaussian_row(&mut rng, k, scale);
        let label = rng.random_range(0..cfg.n_classes);
        if poisoned.contains(&i) {
            row.iter_mut().zip(&trigger).for_each(|(r, t)| *r += cfg.trigger_scale * t);
            labels.push(BackdoorConfig::TARGET_LABEL);
        } else {
            labels.push(label);
        }
        values.extend(row);
    }
    let ids: Vec<u64> = (0..cfg.n as u64).collect();
    let train = FeatureStore::new(k, values, ids, Some(labels))?;

    let mut qvals = Vec::with_capacity(cfg.n_queries * k);
    for _ in 0..cfg.n_queries {
        let mut row = gaussian_row(&mut rng, k, scale);
        row.iter_mut().zip(&trigger).for_each(|(r, t)| *r += cfg.trigger_scale * t);
        qvals.extend(row);
    }
    let queries = FeatureStore::new(
        k,
        qvals,
        (0..cfg.n_queries as u64).collect(),
        Some(vec![BackdoorConfig::TARGET_LABEL; cfg.n_queries]),
    )?;
    let truth_ids: BTreeSet<u64> = poisoned.iter().map(|&p| p as u64).collect();
    let truth = GroundTruth::new(
        (0..cfg.n_queries as u64)
            .map(|q| (q, truth_ids.clone()))
            .collect::<BTreeMap<_, _>>(),
    )?;
    Ok(BackdoorData {
        train,
        queries,
        truth,
        trigger,
    })
}

/// Greedy rankings of length `budget` for every query of a backdoor set.
pub fn backdoor_rankings(data: &BackdoorData, criterion: Criterion, sigma2: f64, budget: usize) -> Result<Rankings> {
    let cfg = GreedyConfig::new(criterion, budget, sigma2)?;
    let mut out = Rankings::new();
    for (&qid, row) in data.queries.ids().iter().zip(data.queries.rows()) {
        let q = QueryVector::new(row.to_vec())?;
        out.insert(qid, attribute(&data.train, &q, &cfg)?.ranking());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelInfoRow {
    pub sigma2: f64,
    pub noise_ratio: f64,
    pub budget: usize,
    pub reference_nats: f64,
    pub gain_exact: f64,
    pub gain_approx: f64,
}

/// For each `(sigma2, M)` cell, selects with greedy InfoLoss (the reference),
/// exact InfoGain and approximate InfoGain, and reports the information loss
/// of each method's subset relative to the reference subset.
pub fn relinfo_sweep(store: &FeatureStore, q: &QueryVector, sigma2_grid: &[f64], budgets: &[usize]) -> Result<Vec<RelInfoRow>> {
    let lambda = gram_lambda_max(store);
    let mut rows = Vec::with_capacity(sigma2_grid.len() * budgets.len());
    for &sigma2 in sigma2_grid {
        let noise = NoiseModel::new(sigma2)?;
        let gp = Surrogate::new(store, noise);
        for &m in budgets {
            let select = |c: Criterion| -> Result<ConditioningSet> {
                ConditioningSet::new(attribute(store, q, &GreedyConfig::new(c, m, sigma2)?)?.selected)
            };
            let reference = info_loss_with(&gp, &select(Criterion::InfoLoss)?, q)?.value();
            if reference <= crate::criteria::REFERENCE_TOL {
                return Err(Error::DegenerateReference(reference));
            }
            let score = |c: Criterion| -> Result<f64> { Ok(info_loss_with(&gp, &select(c)?, q)?.value() / reference) };
            rows.push(RelInfoRow {
                sigma2,
                noise_ratio: sigma2 / lambda,
                budget: m,
                reference_nats: reference,
                gain_exact: score(Criterion::InfoGainExact)?,
                gain_approx: score(Criterion::InfoGainApprox)?,
            });
        }
    }
    Ok(rows)
}

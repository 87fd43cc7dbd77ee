//! Greedy subset selection in the sketch (weight) space.
//!
//! Every selector keeps the precision inverse `S_A^-1` and the residual
//! queries `r_q = S_A^-1 phi_q` up to date with rank-one updates, so a round
//! costs `O(K^2)` for the state plus one `O(NK)` pass over the candidates.
//!
//! | criterion            | round winner                                        | state op  |
//! |----------------------|-----------------------------------------------------|-----------|
//! | `InfoGainExact`      | `(phi_x' r)^2 / (sigma2 + v_x)`                      | update    |
//! | `InfoLoss`           | `(phi_x' r)^2 / (sigma2 - v_x)`, starting from `S_D` | downdate  |
//! | `InfoGainApprox`     | `(phi_x' r)^2`                                      | update    |
//! | `MultiQueryExact`    | `sum_q (phi_x' r_q)^2 / (sigma2 + v_x)`              | update    |
//! | `MultiQueryApprox`   | `sum_q (phi_x' r_q)^2`                              | update    |
//!
//! Ties go to the lowest example id. Candidate scoring runs on the rayon
//! pool; the result does not depend on the number of threads.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::NoiseModel;
use crate::linalg::{precision_downdate, precision_update, PrecisionInverse};
use crate::retrieval::{rank_order, topk_squared_ip_two_query, RankedList, SearchBackend};
use crate::store::{dot, FeatureStore, QueryMatrix, QueryVector};

/// `sigma2 - v_x` below this fraction of `sigma2` means the removal state collapsed.
pub const LOSS_DENOMINATOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    InfoGainExact,
    InfoLoss,
    InfoGainApprox,
    MultiQueryExact,
    MultiQueryApprox,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::InfoGainExact,
        Criterion::InfoLoss,
        Criterion::InfoGainApprox,
        Criterion::MultiQueryExact,
        Criterion::MultiQueryApprox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::InfoGainExact => "info_gain_exact",
            Criterion::InfoLoss => "info_loss",
            Criterion::InfoGainApprox => "info_gain_approx",
            Criterion::MultiQueryExact => "multi_query_exact",
            Criterion::MultiQueryApprox => "multi_query_approx",
        }
    }

    pub fn is_multi_query(self) -> bool {
        matches!(self, Criterion::MultiQueryExact | Criterion::MultiQueryApprox)
    }

    fn mode(self) -> Mode {
        match self {
            Criterion::InfoGainExact | Criterion::MultiQueryExact => Mode::GainExact,
            Criterion::InfoGainApprox | Criterion::MultiQueryApprox => Mode::GainApprox,
            Criterion::InfoLoss => Mode::Loss,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown criterion {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    GainExact,
    GainApprox,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyConfig {
    pub criterion: Criterion,
    pub budget: usize,
    pub noise: NoiseModel,
    /// Restricts candidates to rows carrying this label.
    pub candidate_filter: Option<u32>,
    /// Recorded in the fingerprint only; selection itself is deterministic.
    pub seed: u64,
}

impl GreedyConfig {
    pub fn new(criterion: Criterion, budget: usize, sigma2: f64) -> Result<Self> {
        Ok(GreedyConfig {
            criterion,
            budget,
            noise: NoiseModel::new(sigma2)?,
            candidate_filter: None,
            seed: 0,
        })
    }

    pub fn with_filter(mut self, label: Option<u32>) -> Self {
        self.candidate_filter = label;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sigma2(&self) -> f64 {
        self.noise.sigma2()
    }

    /// SHA-256 over the configuration, the store digest and the queries.
    pub fn fingerprint(&self, store: &FeatureStore, queries: &[QueryVector]) -> String {
        let mut h = Sha256::new();
        h.update(b"infotrace-greedy-v1");
        h.update(self.criterion.name().as_bytes());
        h.update(self.sigma2().to_bits().to_le_bytes());
        h.update((self.budget as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        match self.candidate_filter {
            Some(l) => {
                h.update([1u8]);
                h.update(l.to_le_bytes());
            }
            None => h.update([0u8]),
        }
        h.update(store.digest());
        for q in queries {
            h.update((q.dim() as u64).to_le_bytes());
            for v in q.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub id: u64,
    /// Value of the round's selection rule for the winner.
    pub raw_score: f64,
    /// Exact information gained (or lost) in this round, summed over queries.
    pub marginal_nats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub acquired: Vec<u64>,
    pub precision_inv: PrecisionInverse,
    /// One residual `S_A^-1 phi_q` per query.
    pub residuals: Vec<Vec<f64>>,
    pub step_log: Vec<StepRecord>,
}

impl SelectionState {
    /// Residual of the first (for single-query runs, the only) query.
    pub fn residual(&self) -> &[f64] {
        &self.residuals[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub criterion: Criterion,
    pub selected: Vec<u64>,
    pub per_step_score: Vec<f64>,
    pub marginal_nats: Vec<f64>,
    pub cumulative_nats: Vec<f64>,
    pub config_fingerprint: String,
}

impl AttributionResult {
    /// Greedy order as a ranked list scored by the per-step rule.
    pub fn ranking(&self) -> RankedList {
        RankedList::from_selection(self.selected.clone(), self.per_step_score.clone())
            .expect("greedy selections are duplicate-free")
    }

    pub fn total_nats(&self) -> f64 {
        self.cumulative_nats.last().copied().unwrap_or(0.0)
    }
}

/// Incremental greedy selector. Call [`GreedySelector::step`] repeatedly or
/// [`GreedySelector::run`] for the configured budget.
pub struct GreedySelector<'s> {
    store: &'s FeatureStore,
    cfg: GreedyConfig,
    mode: Mode,
    queries: Vec<QueryVector>,
    pool: Vec<usize>,
    taken: Vec<bool>,
    /// `v_x^A` per store position (only pool entries are maintained).
    self_var: Vec<f64>,
    /// `v_q^A` per query.
    query_var: Vec<f64>,
    state: SelectionState,
}

impl<'s> GreedySelector<'s> {
    pub fn new(store: &'s FeatureStore, queries: &QueryMatrix, cfg: GreedyConfig) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        if queries.k() != store.k() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: store.k(),
                found: queries.k(),
            });
        }
        if !cfg.criterion.is_multi_query() && queries.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} takes exactly one query, got {}",
                cfg.criterion,
                queries.len()
            )));
        }
        if queries.rows().iter().all(|q| q.norm_squared() == 0.0) {
            return Err(if cfg.criterion.is_multi_query() {
                Error::DegenerateQueries
            } else {
                Error::ZeroPriorVariance
            });
        }
        let pool = store.candidate_positions(cfg.candidate_filter)?;
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        if cfg.budget == 0 || cfg.budget > pool.len() {
            return Err(Error::InvalidBudget {
                budget: cfg.budget,
                pool: pool.len(),
            });
        }
        let k = store.k();
        let sigma2 = cfg.sigma2();
        let mode = cfg.criterion.mode();
        let precision_inv = match mode {
            Mode::Loss => PrecisionInverse::from_rows(k, store.rows(), sigma2)?,
            _ => PrecisionInverse::identity(k),
        };
        let mut self_var = vec![0.0; store.n()];
        if mode != Mode::GainApprox {
            let inv = &precision_inv;
            let vals: Vec<(usize, f64)> = pool
                .par_iter()
                .map(|&p| {
                    let phi = store.row(p);
                    let v = match mode {
                        Mode::Loss => inv.quad_form(phi, phi),
                        _ => dot(phi, phi),
                    };
                    (p, v)
                })
                .collect();
            for (p, v) in vals {
                self_var[p] = v;
            }
        }
        let queries = queries.rows().to_vec();
        let residuals: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| precision_inv.apply(q.as_slice()).as_slice().to_vec())
            .collect();
        let query_var = queries
            .iter()
            .zip(&residuals)
            .map(|(q, r)| dot(q.as_slice(), r))
            .collect();
        Ok(GreedySelector {
            store,
            taken: vec![false; store.n()],
            cfg,
            mode,
            queries,
            pool,
            self_var,
            query_var,
            state: SelectionState {
                acquired: Vec::new(),
                precision_inv,
                residuals,
                step_log: Vec::new(),
            },
        })
    }

    pub fn single(store: &'s FeatureStore, q: &QueryVector, cfg: GreedyConfig) -> Result<Self> {
        Self::new(store, &QueryMatrix::new(vec![q.clone()])?, cfg)
    }

    pub fn state(&self) -> &SelectionState {
        &self.state
    }

    pub fn config(&self) -> &GreedyConfig {
        &self.cfg
    }

    /// Current `v_x^A` (gain) or `v_x^{D\A}` (loss) cached for store position `p`.
    pub fn cached_example_variance(&self, p: usize) -> f64 {
        self.self_var[p]
    }

    /// Current rule value for every unacquired pool candidate, by id.
    pub fn candidate_scores(&self) -> Vec<(u64, f64)> {
        self.pool
            .iter()
            .filter(|&&p| !self.taken[p])
            .map(|&p| (self.store.id(p), self.score(p)))
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.pool.len() - self.state.acquired.len()
    }

    fn cross(&self, phi: &[f64]) -> f64 {
        // Sum over queries of (phi' r_q)^2; one query reduces to a plain square.
        self.state
            .residuals
            .iter()
            .map(|r| {
                let c = dot(phi, r);
                c * c
            })
            .sum()
    }

    fn score(&self, p: usize) -> f64 {
        let num = self.cross(self.store.row(p));
        let sigma2 = self.cfg.sigma2();
        match self.mode {
            Mode::GainApprox => num,
            Mode::GainExact => num / (sigma2 + self.self_var[p]),
            Mode::Loss => num / (sigma2 - self.self_var[p]),
        }
    }

    fn check_loss_denominators(&self) -> Result<()> {
        let sigma2 = self.cfg.sigma2();
        for &p in &self.pool {
            if self.taken[p] {
                continue;
            }
            let den = sigma2 - self.self_var[p];
            if den <= LOSS_DENOMINATOR_TOL * sigma2 {
                return Err(Error::DegenerateDenominator { value: den });
            }
        }
        Ok(())
    }

    /// Best unacquired candidate by full scan: `(position, score)`.
    fn argmax(&self) -> Option<(usize, f64)> {
        self.pool
            .par_iter()
            .filter(|&&p| !self.taken[p])
            .map(|&p| (p, self.score(p)))
            .reduce_with(|a, b| {
                let ka = (self.store.id(a.0), a.1);
                let kb = (self.store.id(b.0), b.1);
                if rank_order(&ka, &kb).is_le() {
                    a
                } else {
                    b
                }
            })
    }

    /// Runs one greedy round, choosing the winner by full scan.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.acquired.len() + 1;
        if self.remaining() == 0 {
            return Err(Error::EmptyPool);
        }
        if self.mode == Mode::Loss {
            self.check_loss_denominators().map_err(Error::at_step(step))?;
        }
        let (p, score) = self.argmax().ok_or(Error::EmptyPool)?;
        self.acquire(p, score).map_err(Error::at_step(step))
    }

    /// Runs one approximate-gain round, retrieving the winner through a
    /// vanilla inner-product backend with the two-query emulation.
    pub fn step_with_backend<B: SearchBackend + ?Sized>(&mut self, backend: &B) -> Result<StepRecord> {
        let step = self.state.acquired.len() + 1;
        if self.mode != Mode::GainApprox || self.queries.len() != 1 {
            return Err(Error::InvalidConfig(
                "index retrieval serves the single-query approximate criterion only".into(),
            ));
        }
        if backend.len() != self.store.n() || backend.dim() != self.store.k() {
            return Err(Error::InvalidConfig("search backend does not index this store".into()));
        }
        if self.remaining() == 0 {
            return Err(Error::EmptyPool);
        }
        let in_pool: HashSet<usize> = self.pool.iter().copied().collect();
        let masked: HashSet<u64> = (0..self.store.n())
            .filter(|p| self.taken[*p] || !in_pool.contains(p))
            .map(|p| self.store.id(p))
            .collect();
        let hit = topk_squared_ip_two_query(backend, &self.state.residuals[0], 1, &masked);
        let (id, score) = *hit.first().ok_or(Error::EmptyPool)?;
        let p = self.store.position(id)?;
        self.acquire(p, score).map_err(Error::at_step(step))
    }

    fn acquire(&mut self, p: usize, raw_score: f64) -> Result<StepRecord> {
        let sigma2 = self.cfg.sigma2();
        let phi = self.store.row(p);
        let inv = &self.state.precision_inv;
        let u = inv.apply(phi);
        let v_x = dot(phi, u.as_slice());
        let sign = if self.mode == Mode::Loss { -1.0 } else { 1.0 };
        let den = sigma2 + sign * v_x;
        if !(den > 0.0) {
            return Err(Error::DegenerateDenominator { value: den });
        }

        // Exact per-query change in variance from the current state.
        let mut marginal = 0.0;
        for (r, &vq) in self.state.residuals.iter().zip(&self.query_var) {
            if vq <= 0.0 {
                continue;
            }
            let c = dot(phi, r);
            let delta = c * c / den;
            marginal += match self.mode {
                Mode::Loss => 0.5 * (delta / vq).ln_1p(),
                _ => -0.5 * (-delta / vq).ln_1p(),
            };
        }

        let next = match self.mode {
            Mode::Loss => precision_downdate(inv, phi, sigma2)?,
            _ => precision_update(inv, phi, sigma2)?,
        };
        self.taken[p] = true;
        if self.mode != Mode::GainApprox {
            let store = self.store;
            let taken = &self.taken;
            let u_ref = u.as_slice();
            let updates: Vec<(usize, f64)> = self
                .pool
                .par_iter()
                .filter(|&&x| !taken[x])
                .map(|&x| {
                    let t = dot(store.row(x), u_ref);
                    (x, t * t / den)
                })
                .collect();
            for (x, d) in updates {
                self.self_var[x] -= sign * d;
            }
        }
        self.state.residuals = self
            .queries
            .iter()
            .map(|q| next.apply(q.as_slice()).as_slice().to_vec())
            .collect();
        self.query_var = self
            .queries
            .iter()
            .zip(&self.state.residuals)
            .map(|(q, r)| dot(q.as_slice(), r))
            .collect();
        self.state.precision_inv = next;
        let record = StepRecord {
            id: self.store.id(p),
            raw_score,
            marginal_nats: marginal,
        };
        self.state.acquired.push(record.id);
        self.state.step_log.push(record);
        Ok(record)
    }

    fn finish(self) -> AttributionResult {
        let fingerprint = self.cfg.fingerprint(self.store, &self.queries);
        let log = &self.state.step_log;
        let mut total = 0.0;
        let cumulative = log
            .iter()
            .map(|r| {
                total += r.marginal_nats;
                total
            })
            .collect();
        AttributionResult {
            criterion: self.cfg.criterion,
            selected: log.iter().map(|r| r.id).collect(),
            per_step_score: log.iter().map(|r| r.raw_score).collect(),
            marginal_nats: log.iter().map(|r| r.marginal_nats).collect(),
            cumulative_nats: cumulative,
            config_fingerprint: fingerprint,
        }
    }

    pub fn run(mut self) -> Result<AttributionResult> {
        while self.state.acquired.len() < self.cfg.budget {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn run_with_backend<B: SearchBackend + ?Sized>(mut self, backend: &B) -> Result<AttributionResult> {
        while self.state.acquired.len() < self.cfg.budget {
            self.step_with_backend(backend)?;
        }
        Ok(self.finish())
    }
}

fn expect_criterion(cfg: &GreedyConfig, want: Criterion) -> Result<GreedyConfig> {
    if cfg.criterion != want {
        return Err(Error::InvalidConfig(format!(
            "expected criterion {want}, got {}",
            cfg.criterion
        )));
    }
    Ok(cfg.clone())
}

/// Greedy rule of the exact information gain.
pub fn greedy_info_gain_exact(store: &FeatureStore, q: &QueryVector, cfg: &GreedyConfig) -> Result<AttributionResult> {
    GreedySelector::single(store, q, expect_criterion(cfg, Criterion::InfoGainExact)?)?.run()
}

/// Greedy removal rule of the information loss.
pub fn greedy_info_loss(store: &FeatureStore, q: &QueryVector, cfg: &GreedyConfig) -> Result<AttributionResult> {
    GreedySelector::single(store, q, expect_criterion(cfg, Criterion::InfoLoss)?)?.run()
}

/// Linear-response approximation of the gain: maximize `(phi_x' r)^2`.
/// Nats are still reported from exact variances.
pub fn greedy_info_gain_approx(store: &FeatureStore, q: &QueryVector, cfg: &GreedyConfig) -> Result<AttributionResult> {
    GreedySelector::single(store, q, expect_criterion(cfg, Criterion::InfoGainApprox)?)?.run()
}

pub fn greedy_info_gain_approx_indexed<B: SearchBackend + ?Sized>(
    store: &FeatureStore,
    q: &QueryVector,
    cfg: &GreedyConfig,
    backend: &B,
) -> Result<AttributionResult> {
    GreedySelector::single(store, q, expect_criterion(cfg, Criterion::InfoGainApprox)?)?.run_with_backend(backend)
}

/// Joint selection for a set of queries (coreset selection).
pub fn multi_query_greedy(store: &FeatureStore, queries: &QueryMatrix, cfg: &GreedyConfig) -> Result<AttributionResult> {
    if !cfg.criterion.is_multi_query() {
        return Err(Error::InvalidConfig(format!(
            "{} is not a multi-query criterion",
            cfg.criterion
        )));
    }
    GreedySelector::new(store, queries, cfg.clone())?.run()
}

/// Dispatches on `cfg.criterion` for a single query.
pub fn attribute(store: &FeatureStore, q: &QueryVector, cfg: &GreedyConfig) -> Result<AttributionResult> {
    if cfg.criterion.is_multi_query() {
        return multi_query_greedy(store, &QueryMatrix::new(vec![q.clone()])?, cfg);
    }
    GreedySelector::single(store, q, cfg.clone())?.run()
}

/// Moments of a candidate `phi_x` under the current state, from which the
/// exact and first-order variance changes follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMoments {
    /// `v_*^A`
    pub query_variance: f64,
    /// `v_x,*^A`
    pub cross: f64,
    /// `v_x^A`
    pub example_variance: f64,
    pub sigma2: f64,
}

impl CandidateMoments {
    pub fn new(state: &SelectionState, phi_x: &[f64], q: &QueryVector, noise: NoiseModel) -> Result<Self> {
        let inv = &state.precision_inv;
        if phi_x.len() != inv.dim() || q.dim() != inv.dim() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: inv.dim(),
                found: phi_x.len().max(q.dim()),
            });
        }
        Ok(CandidateMoments {
            query_variance: inv.quad_form(q.as_slice(), q.as_slice()),
            cross: inv.quad_form(phi_x, q.as_slice()),
            example_variance: inv.quad_form(phi_x, phi_x),
            sigma2: noise.sigma2(),
        })
    }

    /// `(v_x,*)^2 / (sigma2 + v_x)`
    pub fn exact_reduction(&self) -> f64 {
        self.cross * self.cross / (self.sigma2 + self.example_variance)
    }

    /// `(v_x,*)^2 / sigma2`
    pub fn linear_reduction(&self) -> f64 {
        self.cross * self.cross / self.sigma2
    }

    /// `v_exact - v_approx`, taken as a difference of reductions so the
    /// shared `v_*^A` does not cancel.
    pub fn linear_response_error(&self) -> f64 {
        self.linear_reduction() - self.exact_reduction()
    }

    /// Variance after adding `phi_x` with weight `eps` in the likelihood.
    pub fn perturbed_variance(&self, eps: f64) -> f64 {
        self.query_variance - eps * self.cross * self.cross / (self.sigma2 + eps * self.example_variance)
    }
}

/// First-order variance after adding `phi_x`: `v_*^A - (v_x,*^A)^2 / sigma2`.
pub fn linear_response_variance(
    state: &SelectionState,
    phi_x: &[f64],
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    let m = CandidateMoments::new(state, phi_x, q, noise)?;
    Ok(m.query_variance - m.linear_reduction())
}

/// Exact variance after adding `phi_x`: `v_*^A - (v_x,*^A)^2 / (sigma2 + v_x^A)`.
pub fn add_one_in_variance(
    state: &SelectionState,
    phi_x: &[f64],
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    let m = CandidateMoments::new(state, phi_x, q, noise)?;
    Ok(m.query_variance - m.exact_reduction())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{info_gain, info_loss};
    use crate::gp::ConditioningSet;
    use crate::retrieval::FlatIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, k: usize) -> (FeatureStore, QueryVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let q = QueryVector::new((0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (FeatureStore::from_rows(&rows).unwrap(), q)
    }

    fn cfg(c: Criterion, m: usize, s: f64) -> GreedyConfig {
        GreedyConfig::new(c, m, s).unwrap()
    }

    #[test]
    fn aligned_row_wins_first() {
        let s = FeatureStore::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 2.0, 0.0],
            vec![0.0, 0.0, 5.0],
            vec![0.0, -3.0, 0.0],
        ])
        .unwrap();
        let q = QueryVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        // Only row 1 correlates with the query.
        for c in [Criterion::InfoGainExact, Criterion::InfoLoss, Criterion::InfoGainApprox] {
            let r = attribute(&s, &q, &cfg(c, 1, 1.0)).unwrap();
            assert_eq!(r.selected, vec![1], "{c}");
        }
    }

    #[test]
    fn exact_query_copy_wins() {
        let q = QueryVector::new(vec![0.6, 0.8, 0.0]).unwrap();
        let s = FeatureStore::from_rows(&[vec![-0.8, 0.6, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let r = greedy_info_gain_exact(&s, &q, &cfg(Criterion::InfoGainExact, 2, 0.5)).unwrap();
        assert_eq!(r.selected[0], 1);
    }

    #[test]
    fn cumulative_matches_subset_criteria() {
        let (s, q) = random_instance(1, 40, 6);
        let nm = NoiseModel::new(0.5).unwrap();
        let gain = greedy_info_gain_exact(&s, &q, &cfg(Criterion::InfoGainExact, 6, 0.5)).unwrap();
        let set = ConditioningSet::new(gain.selected.clone()).unwrap();
        let oracle = info_gain(&s, &set, &q, nm).unwrap().value();
        assert!((gain.total_nats() - oracle).abs() < 1e-10 * oracle.max(1.0));
        assert!(gain.cumulative_nats.windows(2).all(|w| w[1] >= w[0]));

        let loss = greedy_info_loss(&s, &q, &cfg(Criterion::InfoLoss, 6, 0.5)).unwrap();
        let set = ConditioningSet::new(loss.selected.clone()).unwrap();
        let oracle = info_loss(&s, &set, &q, nm).unwrap().value();
        assert!((loss.total_nats() - oracle).abs() < 1e-9 * oracle.max(1.0));

        let approx = greedy_info_gain_approx(&s, &q, &cfg(Criterion::InfoGainApprox, 6, 0.5)).unwrap();
        let set = ConditioningSet::new(approx.selected.clone()).unwrap();
        let oracle = info_gain(&s, &set, &q, nm).unwrap().value();
        assert!((approx.total_nats() - oracle).abs() < 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn first_loss_pick_is_singleton_argmax() {
        let (s, q) = random_instance(2, 30, 5);
        let nm = NoiseModel::new(0.3).unwrap();
        let r = greedy_info_loss(&s, &q, &cfg(Criterion::InfoLoss, 1, 0.3)).unwrap();
        let best = s
            .ids()
            .iter()
            .map(|&id| (id, info_loss(&s, &ConditioningSet::new(vec![id]).unwrap(), &q, nm).unwrap().value()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(r.selected, vec![best.0]);
    }

    #[test]
    fn unit_norm_rows_make_first_approx_pick_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = dot(&v, &v).sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let s = FeatureStore::from_rows(&rows).unwrap();
        let q = QueryVector::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = greedy_info_gain_approx(&s, &q, &cfg(Criterion::InfoGainApprox, 1, 2.0)).unwrap();
        let e = greedy_info_gain_exact(&s, &q, &cfg(Criterion::InfoGainExact, 1, 2.0)).unwrap();
        assert_eq!(a.selected, e.selected);
    }

    #[test]
    fn state_stays_consistent() {
        let (s, q) = random_instance(4, 60, 10);
        let sigma2 = 0.7;
        for c in [Criterion::InfoGainExact, Criterion::InfoLoss, Criterion::InfoGainApprox] {
            let mut sel = GreedySelector::single(&s, &q, cfg(c, 15, sigma2)).unwrap();
            for _ in 0..15 {
                sel.step().unwrap();
                let st = sel.state();
                let rows: Vec<&[f64]> = match c {
                    Criterion::InfoLoss => s
                        .ids()
                        .iter()
                        .filter(|id| !st.acquired.contains(id))
                        .map(|&id| s.row_by_id(id).unwrap())
                        .collect(),
                    _ => st.acquired.iter().map(|&id| s.row_by_id(id).unwrap()).collect(),
                };
                let fresh = PrecisionInverse::from_rows(10, rows, sigma2).unwrap();
                let drift = (st.precision_inv.as_matrix() - fresh.as_matrix()).amax();
                assert!(drift <= 1e-6, "{c}: drift {drift}");
                let r = st.precision_inv.apply(q.as_slice());
                let err = r.iter().zip(st.residual()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-9);
                for p in 0..s.n() {
                    if c == Criterion::InfoGainApprox || st.acquired.contains(&s.id(p)) {
                        continue;
                    }
                    let phi = s.row(p);
                    let v = st.precision_inv.quad_form(phi, phi);
                    let d = (sel.cached_example_variance(p) - v).abs();
                    assert!(d < 1e-10, "{c}: {d:e} v={v}");
                }
            }
        }
    }

    #[test]
    fn residual_matches_kernel_ridge_projection() {
        let (s, q) = random_instance(5, 30, 7);
        let sigma2 = 0.4;
        let mut sel = GreedySelector::single(&s, &q, cfg(Criterion::InfoGainApprox, 5, sigma2)).unwrap();
        for _ in 0..5 {
            sel.step().unwrap();
        }
        let st = sel.state();
        let m = st.acquired.len();
        let phi = nalgebra::DMatrix::from_fn(m, 7, |a, b| s.row_by_id(st.acquired[a]).unwrap()[b]);
        let qv = nalgebra::DVector::from_column_slice(q.as_slice());
        let g = &phi * phi.transpose() + nalgebra::DMatrix::identity(m, m) * sigma2;
        let proj = &qv - phi.transpose() * (g.full_piv_lu().try_inverse().unwrap() * (&phi * &qv));
        for (a, b) in proj.iter().zip(st.residual()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn linear_response_error_closed_form() {
        let (s, q) = random_instance(6, 20, 5);
        let nm = NoiseModel::new(0.8).unwrap();
        let mut sel = GreedySelector::single(&s, &q, cfg(Criterion::InfoGainExact, 4, 0.8)).unwrap();
        for _ in 0..3 {
            sel.step().unwrap();
        }
        let st = sel.state();
        for p in 0..s.n() {
            let phi = s.row(p);
            let exact = add_one_in_variance(st, phi, &q, nm).unwrap();
            let approx = linear_response_variance(st, phi, &q, nm).unwrap();
            let cross = st.precision_inv.quad_form(phi, q.as_slice());
            let vx = st.precision_inv.quad_form(phi, phi);
            let closed = cross * cross / 0.8 * vx / (0.8 + vx);
            assert!(approx <= exact);
            assert!(((exact - approx) - closed).abs() <= 1e-10 * closed.max(1e-12));
        }
        // A candidate orthogonal to the residual leaves the variance untouched.
        let r = st.residual().to_vec();
        let mut orth = vec![0.0; 5];
        orth[0] = r[1];
        orth[1] = -r[0];
        let v_q = st.precision_inv.quad_form(q.as_slice(), q.as_slice());
        let lr = linear_response_variance(st, &orth, &q, nm).unwrap();
        assert!((lr - v_q).abs() < 1e-12);
    }

    #[test]
    fn linear_response_is_the_first_order_term() {
        let (s, q) = random_instance(12, 20, 5);
        let nm = NoiseModel::new(0.6).unwrap();
        let mut sel = GreedySelector::single(&s, &q, cfg(Criterion::InfoGainExact, 3, 0.6)).unwrap();
        sel.step().unwrap();
        let st = sel.state();
        for p in 0..s.n() {
            let m = CandidateMoments::new(st, s.row(p), &q, nm).unwrap();
            assert_eq!(m.perturbed_variance(0.0), m.query_variance);
            assert_eq!(m.perturbed_variance(1.0), add_one_in_variance(st, s.row(p), &q, nm).unwrap());
            // d/de at 0 of v - e c^2 / (s + e v_x) is -c^2 / s.
            let h = 1e-6;
            let slope = (m.perturbed_variance(h) - m.perturbed_variance(-h)) / (2.0 * h);
            let lr = linear_response_variance(st, s.row(p), &q, nm).unwrap();
            assert!((slope - (lr - m.query_variance)).abs() <= 1e-8 * (m.query_variance + m.linear_reduction()));
        }
    }

    #[test]
    fn index_retrieval_matches_full_scan() {
        let (s, q) = random_instance(7, 80, 6);
        let c = cfg(Criterion::InfoGainApprox, 12, 0.9);
        let scan = greedy_info_gain_approx(&s, &q, &c).unwrap();
        let idx = FlatIndex::build(&s);
        let via = greedy_info_gain_approx_indexed(&s, &q, &c, &idx).unwrap();
        assert_eq!(scan, via);
    }

    #[test]
    fn filter_and_budget_validation() {
        let s = FeatureStore::new(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0, 1, 2], Some(vec![0, 1, 1])).unwrap();
        let q = QueryVector::new(vec![1.0, 1.0]).unwrap();
        let r = attribute(&s, &q, &cfg(Criterion::InfoGainExact, 2, 1.0).with_filter(Some(1))).unwrap();
        assert!(r.selected.iter().all(|&id| id != 0));
        assert!(matches!(
            attribute(&s, &q, &cfg(Criterion::InfoGainExact, 1, 1.0).with_filter(Some(7))),
            Err(Error::EmptyPool)
        ));
        assert!(matches!(
            attribute(&s, &q, &cfg(Criterion::InfoGainExact, 0, 1.0)),
            Err(Error::InvalidBudget { .. })
        ));
        assert!(matches!(
            attribute(&s, &q, &cfg(Criterion::InfoGainExact, 3, 1.0).with_filter(Some(1))),
            Err(Error::InvalidBudget { budget: 3, pool: 2 })
        ));
        let zero = QueryVector::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            attribute(&s, &zero, &cfg(Criterion::InfoGainExact, 1, 1.0)),
            Err(Error::ZeroPriorVariance)
        ));
    }

    #[test]
    fn ties_prefer_lowest_id() {
        let s = FeatureStore::new(1, vec![1.0, 1.0, 1.0], vec![9, 4, 6], None).unwrap();
        let q = QueryVector::new(vec![1.0]).unwrap();
        let r = attribute(&s, &q, &cfg(Criterion::InfoGainApprox, 3, 1.0)).unwrap();
        assert_eq!(r.selected, vec![4, 6, 9]);
    }

    #[test]
    fn multi_query_single_row_reduction() {
        let (s, q) = random_instance(8, 50, 6);
        let qm = QueryMatrix::new(vec![q.clone()]).unwrap();
        let exact = greedy_info_gain_exact(&s, &q, &cfg(Criterion::InfoGainExact, 8, 0.6)).unwrap();
        let mq = multi_query_greedy(&s, &qm, &cfg(Criterion::MultiQueryExact, 8, 0.6)).unwrap();
        assert_eq!(exact.selected, mq.selected);
        assert_eq!(exact.per_step_score, mq.per_step_score);
        let approx = greedy_info_gain_approx(&s, &q, &cfg(Criterion::InfoGainApprox, 8, 0.6)).unwrap();
        let mqa = multi_query_greedy(&s, &qm, &cfg(Criterion::MultiQueryApprox, 8, 0.6)).unwrap();
        assert_eq!(approx.selected, mqa.selected);
    }

    #[test]
    fn multi_query_degenerate_inputs() {
        let (s, _) = random_instance(9, 10, 3);
        let zeros = QueryMatrix::new(vec![QueryVector::new(vec![0.0; 3]).unwrap(); 2]).unwrap();
        assert!(matches!(
            multi_query_greedy(&s, &zeros, &cfg(Criterion::MultiQueryExact, 2, 1.0)),
            Err(Error::DegenerateQueries)
        ));
        assert!(matches!(QueryMatrix::new(vec![]), Err(Error::EmptyQuerySet)));
        let one = QueryMatrix::new(vec![QueryVector::new(vec![1.0; 3]).unwrap(); 2]).unwrap();
        assert!(GreedySelector::new(&s, &one, cfg(Criterion::InfoGainExact, 1, 1.0)).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (s, q) = random_instance(10, 300, 12);
        let run = |threads: usize, c: Criterion| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| attribute(&s, &q, &cfg(c, 20, 0.5)).unwrap())
        };
        for c in [Criterion::InfoGainExact, Criterion::InfoLoss, Criterion::InfoGainApprox] {
            assert_eq!(run(1, c), run(4, c));
        }
    }

    #[test]
    fn criterion_names_parse() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
            assert_eq!(c.name().replace('_', "-").parse::<Criterion>().unwrap(), c);
        }
        assert!("bogus".parse::<Criterion>().is_err());
    }

    #[test]
    fn fingerprint_depends_on_inputs() {
        let (s, q) = random_instance(11, 10, 3);
        let a = cfg(Criterion::InfoLoss, 2, 1.0);
        let f1 = a.fingerprint(&s, std::slice::from_ref(&q));
        assert_eq!(f1, a.fingerprint(&s, std::slice::from_ref(&q)));
        assert_ne!(f1, a.clone().with_seed(1).fingerprint(&s, std::slice::from_ref(&q)));
        assert_ne!(f1, cfg(Criterion::InfoLoss, 2, 1.5).fingerprint(&s, std::slice::from_ref(&q)));
        assert_eq!(f1.len(), 64);
    }
}

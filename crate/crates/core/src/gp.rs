//! Gaussian-process posterior moments under the linear tangent-feature kernel
//! `k(x, x') = phi_x' phi_x'`.
//!
//! Kernel-space quantities condition on a [`ConditioningSet`] of store rows
//! and factorize `K_c + sigma2 I` once per set; factors are cached inside a
//! [`Surrogate`]. The weight-space form `a' S^-1 b` over a
//! [`PrecisionInverse`] gives the same numbers on the same features.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, PrecisionInverse, SpdMatrix};
use crate::store::{dot, FeatureStore, QueryVector};

/// Variances in `(-NEGATIVE_VARIANCE_TOL * scale, 0)` are round-off and are
/// clamped to zero; anything lower is an error.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma2: f64,
}

impl NoiseModel {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive and finite, got {sigma2}"
            )));
        }
        Ok(NoiseModel { sigma2 })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// An ordered, duplicate-free set of example ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConditioningSet {
    ids: Vec<u64>,
}

impl ConditioningSet {
    pub fn new(ids: Vec<u64>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(ConditioningSet { ids })
    }

    pub fn empty() -> Self {
        ConditioningSet::default()
    }

    /// Every example in the store.
    pub fn all(store: &FeatureStore) -> Self {
        ConditioningSet {
            ids: store.ids().to_vec(),
        }
    }

    /// Store examples not in `self`, in store order.
    pub fn complement(&self, store: &FeatureStore) -> Self {
        let mine: HashSet<u64> = self.ids.iter().copied().collect();
        ConditioningSet {
            ids: store.ids().iter().copied().filter(|id| !mine.contains(id)).collect(),
        }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    pub fn with(&self, id: u64) -> Result<Self> {
        let mut ids = self.ids.clone();
        ids.push(id);
        Self::new(ids)
    }

    pub fn positions(&self, store: &FeatureStore) -> Result<Vec<usize>> {
        self.ids.iter().map(|&id| store.position(id)).collect()
    }
}

/// Linear kernel between two store rows.
pub fn kernel(store: &FeatureStore, i: u64, j: u64) -> Result<f64> {
    Ok(dot(store.row_by_id(i)?, store.row_by_id(j)?))
}

/// Gram matrix `K_c + sigma2 I` over the given positions.
pub fn noisy_gram(store: &FeatureStore, positions: &[usize], sigma2: f64) -> DMatrix<f64> {
    let m = positions.len();
    let mut g = DMatrix::<f64>::zeros(m, m);
    for a in 0..m {
        let ra = store.row(positions[a]);
        for b in 0..=a {
            let v = dot(ra, store.row(positions[b]));
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
        g[(a, a)] += sigma2;
    }
    g
}

fn cross_vector(store: &FeatureStore, positions: &[usize], v: &[f64]) -> DVector<f64> {
    DVector::from_iterator(positions.len(), positions.iter().map(|&p| dot(store.row(p), v)))
}

pub(crate) fn clamp_variance(raw: f64, scale: f64) -> Result<f64> {
    if raw >= 0.0 {
        return Ok(raw);
    }
    if raw > -NEGATIVE_VARIANCE_TOL * scale.max(1.0) {
        log::warn!("clamping round-off variance {raw:e} to zero");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(raw))
    }
}

struct SetFactor {
    positions: Vec<usize>,
    chol: Cholesky,
}

/// Kernel-space GP over a store with a fixed noise model and a factor cache.
pub struct Surrogate<'s> {
    store: &'s FeatureStore,
    noise: NoiseModel,
    cache: RwLock<HashMap<Vec<usize>, Arc<SetFactor>>>,
}

impl<'s> Surrogate<'s> {
    pub fn new(store: &'s FeatureStore, noise: NoiseModel) -> Self {
        Surrogate {
            store,
            noise,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &'s FeatureStore {
        self.store
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn cached_factors(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    fn factor(&self, c: &ConditioningSet) -> Result<Arc<SetFactor>> {
        // Store order, so results depend on the set and not on how it was listed.
        let mut positions = c.positions(self.store)?;
        positions.sort_unstable();
        if let Some(f) = self.cache.read().ok().and_then(|m| m.get(&positions).cloned()) {
            return Ok(f);
        }
        let gram = noisy_gram(self.store, &positions, self.noise.sigma2);
        let chol = SpdMatrix::new(gram)?.factorize()?;
        let f = Arc::new(SetFactor {
            positions: positions.clone(),
            chol,
        });
        if let Ok(mut m) = self.cache.write() {
            m.insert(positions, Arc::clone(&f));
        }
        Ok(f)
    }

    /// `k_c,a' (K_c + sigma2 I)^-1 k_c,b` for arbitrary feature vectors.
    pub fn explained_covariance(&self, c: &ConditioningSet, a: &[f64], b: &[f64]) -> Result<f64> {
        if c.is_empty() {
            return Ok(0.0);
        }
        let f = self.factor(c)?;
        let ka = cross_vector(self.store, &f.positions, a);
        if std::ptr::eq(a, b) {
            return Ok(f.chol.inv_quad_form(&ka));
        }
        let kb = cross_vector(self.store, &f.positions, b);
        Ok(ka.dot(&f.chol.solve(&kb)))
    }

    /// `v_*^c`: posterior variance of the latent at `q` given `c`.
    pub fn posterior_variance(&self, c: &ConditioningSet, q: &QueryVector) -> Result<f64> {
        q.check_dim(self.store)?;
        let prior = q.norm_squared();
        let explained = self.explained_covariance(c, q.as_slice(), q.as_slice())?;
        clamp_variance(prior - explained, prior)
    }

    /// `v_a,b^c` for two feature vectors.
    pub fn posterior_covariance_vectors(
        &self,
        c: &ConditioningSet,
        a: &[f64],
        b: &[f64],
    ) -> Result<f64> {
        Ok(dot(a, b) - self.explained_covariance(c, a, b)?)
    }

    /// `v_x,*^c` between store row `x` and query `q`.
    pub fn posterior_covariance(&self, c: &ConditioningSet, x: u64, q: &QueryVector) -> Result<f64> {
        q.check_dim(self.store)?;
        let phi = self.store.row_by_id(x)?;
        self.posterior_covariance_vectors(c, phi, q.as_slice())
    }

    /// `v_x^c` for store row `x`, which may itself belong to `c`.
    pub fn example_variance(&self, c: &ConditioningSet, x: u64) -> Result<f64> {
        let phi = self.store.row_by_id(x)?;
        let prior = dot(phi, phi);
        clamp_variance(prior - self.explained_covariance(c, phi, phi)?, prior)
    }

    /// `v_*(D \ S) - v_*(D) = [K_y^-1 k]_S' ([K_y^-1]_SS)^-1 [K_y^-1 k]_S`,
    /// using one factorization of the full-data Gram matrix.
    pub fn leave_m_out_increment(&self, removed: &ConditioningSet, q: &QueryVector) -> Result<f64> {
        q.check_dim(self.store)?;
        if removed.is_empty() {
            return Ok(0.0);
        }
        let mut removed_pos = removed.positions(self.store)?;
        removed_pos.sort_unstable();
        let full = self.factor(&ConditioningSet::all(self.store))?;
        // `full.positions` is store order, so positions index directly.
        let kq = cross_vector(self.store, &full.positions, q.as_slice());
        let alpha = full.chol.solve(&kq);
        let n = self.store.n();
        let m = removed_pos.len();
        let mut unit = DMatrix::<f64>::zeros(n, m);
        for (col, &p) in removed_pos.iter().enumerate() {
            unit[(p, col)] = 1.0;
        }
        let inv_cols = full.chol.solve_matrix(&unit);
        let mut block = DMatrix::<f64>::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let v = 0.5 * (inv_cols[(removed_pos[a], b)] + inv_cols[(removed_pos[b], a)]);
                block[(a, b)] = v;
                block[(b, a)] = v;
            }
        }
        let alpha_s = DVector::from_iterator(m, removed_pos.iter().map(|&p| alpha[p]));
        let block_chol = SpdMatrix::new(block)?.factorize()?;
        Ok(block_chol.inv_quad_form(&alpha_s))
    }

    /// `v_*(D \ removed)` from the full-data factorization.
    pub fn leave_m_out_variance(&self, removed: &ConditioningSet, q: &QueryVector) -> Result<f64> {
        let full = self.posterior_variance(&ConditioningSet::all(self.store), q)?;
        let inc = self.leave_m_out_increment(removed, q)?;
        let prior = q.norm_squared();
        clamp_variance(full + inc, prior)
    }
}

pub fn posterior_variance(
    store: &FeatureStore,
    c: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    Surrogate::new(store, noise).posterior_variance(c, q)
}

pub fn posterior_covariance(
    store: &FeatureStore,
    c: &ConditioningSet,
    x: u64,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    Surrogate::new(store, noise).posterior_covariance(c, x, q)
}

pub fn leave_m_out_variance(
    store: &FeatureStore,
    removed: &ConditioningSet,
    q: &QueryVector,
    noise: NoiseModel,
) -> Result<f64> {
    Surrogate::new(store, noise).leave_m_out_variance(removed, q)
}

/// `a' S^-1 b`.
pub fn weightspace_form(inv: &PrecisionInverse, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != inv.dim() || b.len() != inv.dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: inv.dim(),
            found: if a.len() != inv.dim() { a.len() } else { b.len() },
        });
    }
    Ok(inv.quad_form(a, b))
}

/// Fresh `S_c^-1` for the rows of a conditioning set.
pub fn precision_inverse_for(
    store: &FeatureStore,
    c: &ConditioningSet,
    noise: NoiseModel,
) -> Result<PrecisionInverse> {
    let positions = c.positions(store)?;
    PrecisionInverse::from_rows(store.k(), positions.iter().map(|&p| store.row(p)), noise.sigma2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(rng: &mut ChaCha8Rng, n: usize, k: usize) -> FeatureStore {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        FeatureStore::from_rows(&rows).unwrap()
    }

    fn random_query(rng: &mut ChaCha8Rng, k: usize) -> QueryVector {
        QueryVector::new((0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Dense LU inversion of the retained Gram matrix.
    fn dense_variance(store: &FeatureStore, ids: &[u64], q: &[f64], sigma2: f64) -> f64 {
        let pos: Vec<usize> = ids.iter().map(|&i| store.position(i).unwrap()).collect();
        if pos.is_empty() {
            return dot(q, q);
        }
        let g = noisy_gram(store, &pos, sigma2);
        let inv = g.full_piv_lu().try_inverse().unwrap();
        let k = cross_vector(store, &pos, q);
        dot(q, q) - k.dot(&(inv * &k))
    }

    fn noise(s: f64) -> NoiseModel {
        NoiseModel::new(s).unwrap()
    }

    #[test]
    fn kernel_cases() {
        let s = FeatureStore::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(kernel(&s, 2, 2).unwrap(), 25.0);
        assert_eq!(kernel(&s, 0, 1).unwrap(), 0.0);
        assert_eq!(kernel(&s, 0, 2).unwrap(), 3.0);
        assert!(matches!(kernel(&s, 0, 9), Err(Error::UnknownId(9))));
    }

    #[test]
    fn variance_trivial_cases() {
        let s = FeatureStore::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = QueryVector::new(vec![1.0, 0.0]).unwrap();
        let gp = Surrogate::new(&s, noise(1.0));
        assert_eq!(gp.posterior_variance(&ConditioningSet::empty(), &q).unwrap(), 1.0);
        let orth = ConditioningSet::new(vec![1]).unwrap();
        assert_eq!(gp.posterior_variance(&orth, &q).unwrap(), 1.0);
        let aligned = ConditioningSet::new(vec![0]).unwrap();
        assert!((gp.posterior_variance(&aligned, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_trivial_cases() {
        let s = FeatureStore::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 1.0]])
            .unwrap();
        let q = QueryVector::new(vec![1.0, 0.0, 0.5]).unwrap();
        let gp = Surrogate::new(&s, noise(0.3));
        assert_eq!(gp.posterior_covariance(&ConditioningSet::empty(), 2, &q).unwrap(), 2.5);
        let c = ConditioningSet::new(vec![0, 2]).unwrap();
        assert!(gp.posterior_covariance(&c, 1, &q).unwrap().abs() < 1e-15);
    }

    #[test]
    fn covariance_matches_dense_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_store(&mut rng, 30, 8);
        let gp = Surrogate::new(&s, noise(0.4));
        let c = ConditioningSet::new(vec![3, 7, 11, 19, 25]).unwrap();
        let q = random_query(&mut rng, 8);
        let pos: Vec<usize> = c.positions(&s).unwrap();
        let inv = noisy_gram(&s, &pos, 0.4).full_piv_lu().try_inverse().unwrap();
        for x in [0u64, 3, 12] {
            let phi = s.row_by_id(x).unwrap();
            let kx = cross_vector(&s, &pos, phi);
            let kq = cross_vector(&s, &pos, q.as_slice());
            let oracle = dot(phi, q.as_slice()) - kx.dot(&(&inv * &kq));
            let got = gp.posterior_covariance(&c, x, &q).unwrap();
            assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1e-3));
        }
        let a = gp.posterior_covariance_vectors(&c, s.row(1), s.row(2)).unwrap();
        let b = gp.posterior_covariance_vectors(&c, s.row(2), s.row(1)).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn factor_cache_is_order_insensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, 10, 4);
        let gp = Surrogate::new(&s, noise(1.0));
        let q = random_query(&mut rng, 4);
        let a = gp.posterior_variance(&ConditioningSet::new(vec![1, 2, 3]).unwrap(), &q).unwrap();
        let b = gp.posterior_variance(&ConditioningSet::new(vec![3, 1, 2]).unwrap(), &q).unwrap();
        assert_eq!(gp.cached_factors(), 1);
        assert_eq!(a, b);
        let la = gp.leave_m_out_variance(&ConditioningSet::new(vec![4, 0, 7]).unwrap(), &q).unwrap();
        let lb = gp.leave_m_out_variance(&ConditioningSet::new(vec![7, 4, 0]).unwrap(), &q).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn leave_m_out_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_store(&mut rng, 40, 6);
        let q = random_query(&mut rng, 6);
        let gp = Surrogate::new(&s, noise(0.5));
        let full = gp.posterior_variance(&ConditioningSet::all(&s), &q).unwrap();
        assert_eq!(gp.leave_m_out_variance(&ConditioningSet::empty(), &q).unwrap(), full);
        let prior = gp.leave_m_out_variance(&ConditioningSet::all(&s), &q).unwrap();
        assert!((prior - q.norm_squared()).abs() <= 1e-8 * q.norm_squared());
    }

    #[test]
    fn leave_m_out_matches_retained_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 100, 12);
        let q = random_query(&mut rng, 12);
        let gp = Surrogate::new(&s, noise(0.8));
        for m in [1usize, 4, 10] {
            let removed: Vec<u64> = (0..m as u64).map(|i| i * 7 + 3).collect();
            let set = ConditioningSet::new(removed).unwrap();
            let retained = set.complement(&s);
            let oracle = dense_variance(&s, retained.ids(), q.as_slice(), 0.8);
            let got = gp.leave_m_out_variance(&set, &q).unwrap();
            assert!(((got - oracle) / oracle).abs() < 1e-8, "m={m}: {got} vs {oracle}");
        }
    }

    #[test]
    fn weightspace_matches_kernel_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_store(&mut rng, 25, 10);
        let q = random_query(&mut rng, 10);
        let nm = noise(0.6);
        let gp = Surrogate::new(&s, nm);
        let c = ConditioningSet::new(vec![0, 4, 8, 9, 15, 22]).unwrap();
        let inv = precision_inverse_for(&s, &c, nm).unwrap();
        let ks = gp.posterior_variance(&c, &q).unwrap();
        let ws = weightspace_form(&inv, q.as_slice(), q.as_slice()).unwrap();
        assert!(((ks - ws) / ks).abs() < 1e-9);
        let kc = gp.posterior_covariance(&c, 4, &q).unwrap();
        let wc = weightspace_form(&inv, s.row_by_id(4).unwrap(), q.as_slice()).unwrap();
        assert!((kc - wc).abs() < 1e-9 * kc.abs().max(1e-3));
        assert_eq!(
            weightspace_form(&PrecisionInverse::identity(10), s.row(0), s.row(1)).unwrap(),
            dot(s.row(0), s.row(1))
        );
    }

    #[test]
    fn weightspace_block_structure() {
        // Conditioning features live in the first two coordinates; `a` in the last two.
        let s = FeatureStore::from_rows(&[vec![1.0, 2.0, 0.0, 0.0], vec![-1.0, 0.5, 0.0, 0.0]]).unwrap();
        let inv = precision_inverse_for(&s, &ConditioningSet::all(&s), noise(0.2)).unwrap();
        let a = [0.0, 0.0, 1.5, -2.0];
        let b = [3.0, 1.0, 0.5, 4.0];
        let got = weightspace_form(&inv, &a, &b).unwrap();
        assert!((got - dot(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn in_set_variance_below_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_store(&mut rng, 20, 5);
        for sigma2 in [0.01, 1.0, 100.0] {
            let gp = Surrogate::new(&s, noise(sigma2));
            let c = ConditioningSet::all(&s);
            for x in 0..20u64 {
                assert!(gp.example_variance(&c, x).unwrap() < sigma2);
            }
        }
    }

    #[test]
    fn clamping_policy() {
        assert_eq!(clamp_variance(-1e-12, 1.0).unwrap(), 0.0);
        assert!(matches!(clamp_variance(-1e-6, 1.0), Err(Error::NegativeVariance(_))));
    }

    #[test]
    fn duplicate_conditioning_ids() {
        assert!(ConditioningSet::new(vec![1, 2, 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn conditioning_never_increases_variance(
                seed in any::<u64>(),
                sigma2 in 0.01f64..20.0,
                small in 0usize..6,
                extra in 1usize..6,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random_store(&mut rng, 15, 5);
                let q = random_query(&mut rng, 5);
                let gp = Surrogate::new(&s, noise(sigma2));
                let c: Vec<u64> = (0..small as u64).collect();
                let big: Vec<u64> = (0..(small + extra) as u64).collect();
                let v_small = gp.posterior_variance(&ConditioningSet::new(c).unwrap(), &q).unwrap();
                let v_big = gp.posterior_variance(&ConditioningSet::new(big).unwrap(), &q).unwrap();
                prop_assert!(v_big <= v_small + 1e-10);
                prop_assert!(v_big >= 0.0 && v_small <= q.norm_squared() + 1e-12);
            }
        }
    }
}

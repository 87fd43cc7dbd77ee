//! Dense symmetric positive-definite solves and rank-one maintenance of the
//! sketch-space precision inverse.
//!
//! All arithmetic is `f64`. Factorizations follow a bounded jitter policy:
//! when a plain Cholesky factorization fails, `1e-10 * trace / dim` is added
//! to the diagonal and doubled on every further failure, for at most
//! [`MAX_JITTER_DOUBLINGS`] doublings.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Base jitter, relative to the mean diagonal entry.
pub const BASE_JITTER: f64 = 1e-10;
pub const MAX_JITTER_DOUBLINGS: u32 = 6;
/// Max-abs asymmetry tolerated, relative to the largest entry (floored at 1).
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest admissible relative removal denominator `1 - phi' S^-1 phi / sigma2`.
pub const DOWNDATE_TOL: f64 = 1e-12;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest `|m[i,j] - m[j,i]|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let scale = max_abs(m).max(1.0);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidConfig(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if let Some((idx, _)) = m.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: idx % m.nrows(),
            col: idx / m.nrows(),
        });
    }
    Ok(())
}

/// A dense symmetric matrix expected to be positive definite.
///
/// Positive definiteness is only established when the matrix is factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&entries)?;
        Ok(SpdMatrix(entries))
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn factorize(&self) -> Result<Cholesky> {
        Cholesky::new(self)
    }
}

/// Cholesky factor of an [`SpdMatrix`], possibly of a jittered copy.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: nalgebra::Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Cholesky {
    pub fn new(a: &SpdMatrix) -> Result<Self> {
        let m = a.as_matrix();
        if let Some(factor) = nalgebra::Cholesky::new(m.clone()) {
            return Ok(Cholesky {
                factor,
                jitter: 0.0,
            });
        }
        let dim = a.dim();
        let mean_diag = (m.trace() / dim as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = BASE_JITTER * mean_diag;
        for attempt in 0..=MAX_JITTER_DOUBLINGS {
            let mut jittered = m.clone();
            for i in 0..dim {
                jittered[(i, i)] += jitter;
            }
            if let Some(factor) = nalgebra::Cholesky::new(jittered) {
                log::warn!(
                    "cholesky needed jitter {jitter:e} (attempt {}) on a {dim}x{dim} matrix",
                    attempt + 1
                );
                return Ok(Cholesky { factor, jitter });
            }
            jitter *= 2.0;
        }
        Err(Error::NotPositiveDefinite {
            attempts: MAX_JITTER_DOUBLINGS + 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.l_dirty().nrows()
    }

    /// Diagonal jitter that was added before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    /// `b' A^-1 b`, computed as the squared norm of `L^-1 b`.
    pub fn inv_quad_form(&self, b: &DVector<f64>) -> f64 {
        let l = self.factor.l_dirty();
        let mut y = b.clone();
        // Forward substitution against the lower triangle only; the strict
        // upper part of `l_dirty` is garbage.
        let n = y.len();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        y.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.factor.inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn chol_solve(a: &SpdMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.dim() != b.len() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: a.dim(),
            found: b.len(),
        });
    }
    Ok(a.factorize()?.solve(b))
}

/// Inverse of the sketch-space precision `S = I + (1/sigma2) sum phi phi'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionInverse(DMatrix<f64>);

impl PrecisionInverse {
    /// Inverse of the prior precision (the identity).
    pub fn identity(dim: usize) -> Self {
        PrecisionInverse(DMatrix::identity(dim, dim))
    }

    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&entries)?;
        Ok(PrecisionInverse(entries))
    }

    /// Fresh inverse of a precision matrix by Cholesky.
    pub fn from_precision(precision: &SpdMatrix) -> Result<Self> {
        Ok(PrecisionInverse(precision.factorize()?.inverse()))
    }

    /// Fresh inverse of `I + (1/sigma2) sum_r phi_r phi_r'` over the given rows.
    pub fn from_rows<'a, I>(dim: usize, rows: I, sigma2: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut s = DMatrix::<f64>::identity(dim, dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    row: 0,
                    expected: dim,
                    found: row.len(),
                });
            }
            for j in 0..dim {
                let rj = row[j] / sigma2;
                if rj == 0.0 {
                    continue;
                }
                for i in 0..=j {
                    s[(i, j)] += row[i] * rj;
                }
            }
        }
        for j in 0..dim {
            for i in 0..j {
                s[(j, i)] = s[(i, j)];
            }
        }
        Self::from_precision(&SpdMatrix(s))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `S^-1 v`.
    pub fn apply(&self, v: &[f64]) -> DVector<f64> {
        let k = self.dim();
        debug_assert_eq!(v.len(), k);
        let mut out = DVector::<f64>::zeros(k);
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let col = self.0.column(j);
            for i in 0..k {
                out[i] += col[i] * vj;
            }
        }
        out
    }

    /// `a' S^-1 b`.
    pub fn quad_form(&self, a: &[f64], b: &[f64]) -> f64 {
        let sb = self.apply(b);
        a.iter().zip(sb.iter()).map(|(x, y)| x * y).sum()
    }

    fn rank_one(&self, phi: &[f64], scale: f64, sign: f64) -> PrecisionInverse {
        let u = self.apply(phi);
        let mut m = self.0.clone();
        let k = self.dim();
        for j in 0..k {
            let uj = sign * u[j] / scale;
            for i in 0..k {
                m[(i, j)] += u[i] * uj;
            }
        }
        symmetrize(&mut m);
        PrecisionInverse(m)
    }

    pub fn update(&self, phi: &[f64], sigma2: f64) -> Result<Self> {
        precision_update(self, phi, sigma2)
    }

    pub fn downdate(&self, phi: &[f64], sigma2: f64) -> Result<Self> {
        precision_downdate(self, phi, sigma2)
    }
}

fn check_rank_one_args(inv: &PrecisionInverse, phi: &[f64], sigma2: f64) -> Result<()> {
    if phi.len() != inv.dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: inv.dim(),
            found: phi.len(),
        });
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be positive and finite, got {sigma2}"
        )));
    }
    Ok(())
}

/// `(S + phi phi' / sigma2)^-1` from `S^-1` by Sherman-Morrison.
pub fn precision_update(
    inv: &PrecisionInverse,
    phi: &[f64],
    sigma2: f64,
) -> Result<PrecisionInverse> {
    check_rank_one_args(inv, phi, sigma2)?;
    let rel = 1.0 + inv.quad_form(phi, phi) / sigma2;
    if !(rel > 0.0) {
        return Err(Error::DegenerateDenominator { value: rel });
    }
    Ok(inv.rank_one(phi, sigma2 * rel, -1.0))
}

/// `(S - phi phi' / sigma2)^-1` from `S^-1`; the inverse of [`precision_update`].
pub fn precision_downdate(
    inv: &PrecisionInverse,
    phi: &[f64],
    sigma2: f64,
) -> Result<PrecisionInverse> {
    check_rank_one_args(inv, phi, sigma2)?;
    let rel = 1.0 - inv.quad_form(phi, phi) / sigma2;
    if !(rel > DOWNDATE_TOL) {
        return Err(Error::DegenerateDenominator { value: rel });
    }
    Ok(inv.rank_one(phi, sigma2 * rel, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
        symmetrize(&mut a);
        a
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        max_abs(&(a - b))
    }

    #[test]
    fn solve_identity_and_scaled() {
        let x = chol_solve(&SpdMatrix::identity(3), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let a = SpdMatrix::new(DMatrix::identity(2, 2) * 2.0).unwrap();
        let x = chol_solve(&a, &DVector::from_vec(vec![4.0, 6.0])).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15 && (x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn solve_matches_full_pivot_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 16);
            let b = DVector::<f64>::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
            let x = chol_solve(&SpdMatrix::new(a.clone()).unwrap(), &b).unwrap();
            let oracle = a.clone().full_piv_lu().try_inverse().unwrap() * &b;
            let rel = (&x - &oracle).amax() / oracle.amax();
            assert!(rel < 1e-8, "rel {rel}");
            let resid = (&a * &x - &b).amax();
            assert!(resid <= 1e-8 * (1.0 + b.amax()));
        }
    }

    #[test]
    fn rejects_indefinite_after_jitter() {
        let a = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        assert!(matches!(
            a.factorize(),
            Err(Error::NotPositiveDefinite { attempts: 7 })
        ));
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // Rank-one PSD matrix: plain Cholesky hits an exactly zero pivot.
        let a = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let chol = a.factorize().unwrap();
        assert!(chol.jitter() > 0.0);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
    }

    #[test]
    fn inv_quad_form_matches_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 9);
        let b = DVector::<f64>::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let chol = SpdMatrix::new(a).unwrap().factorize().unwrap();
        let direct = b.dot(&chol.solve(&b));
        assert!((chol.inv_quad_form(&b) - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn update_zero_phi_is_identity() {
        let inv = PrecisionInverse::identity(3);
        assert_eq!(inv.update(&[0.0; 3], 1.0).unwrap(), inv);
        assert_eq!(inv.downdate(&[0.0; 3], 1.0).unwrap(), inv);
    }

    #[test]
    fn update_unit_vector_halves_entry() {
        let inv = PrecisionInverse::identity(3).update(&[1.0, 0.0, 0.0], 1.0).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 1.0]));
        assert!(max_abs_diff(inv.as_matrix(), &expected) < 1e-15);
    }

    #[test]
    fn many_updates_match_fresh_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 32;
        let sigma2 = 2.0;
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut inv = PrecisionInverse::identity(k);
        for r in &rows {
            inv = inv.update(r, sigma2).unwrap();
        }
        let fresh = PrecisionInverse::from_rows(k, rows.iter().map(|r| r.as_slice()), sigma2).unwrap();
        assert!(max_abs_diff(inv.as_matrix(), fresh.as_matrix()) < 1e-6);
        assert!(asymmetry(inv.as_matrix()) <= 1e-12);
    }

    #[test]
    fn downdate_sequence_matches_fresh_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = 16;
        let sigma2 = 0.7;
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut inv = PrecisionInverse::from_rows(k, rows.iter().map(|r| r.as_slice()), sigma2).unwrap();
        for r in &rows[..25] {
            inv = inv.downdate(r, sigma2).unwrap();
        }
        let fresh =
            PrecisionInverse::from_rows(k, rows[25..].iter().map(|r| r.as_slice()), sigma2).unwrap();
        assert!(max_abs_diff(inv.as_matrix(), fresh.as_matrix()) < 1e-6);
    }

    #[test]
    fn downdate_of_absent_point_can_fail() {
        // Removing a large point that was never added drives the denominator negative.
        let inv = PrecisionInverse::identity(2);
        let err = inv.downdate(&[3.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateDenominator { .. }));
    }

    #[test]
    fn dimension_and_noise_validation() {
        let inv = PrecisionInverse::identity(2);
        assert!(matches!(
            inv.update(&[1.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(inv.update(&[1.0, 0.0], 0.0).is_err());
        assert!(chol_solve(&SpdMatrix::identity(2), &DVector::zeros(3)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn downdate_inverts_update(
                seed in any::<u64>(),
                k in 1usize..12,
                sigma2 in 0.05f64..50.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let base: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let inv = PrecisionInverse::from_rows(k, base.iter().map(|r| r.as_slice()), sigma2).unwrap();
                let phi: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let back = inv.update(&phi, sigma2).unwrap().downdate(&phi, sigma2).unwrap();
                prop_assert!(max_abs_diff(back.as_matrix(), inv.as_matrix()) <= 1e-9);
                prop_assert!(asymmetry(back.as_matrix()) <= 1e-12);
            }
        }
    }
}

//! Random-projection sketches of tangent features.
//!
//! A sketch maps a P-dimensional row `g` to `phi = A g / sqrt(K)` with
//! `A` a K x P matrix of independent Rademacher or standard-normal entries,
//! so that `E[phi_x' phi_y] = g_x' g_y`.
//!
//! `A` is never stored. Row `i` of `A` is regenerated on demand from a
//! ChaCha20 generator seeded with `seed` (via `SeedableRng::seed_from_u64`)
//! on stream `i`, reading the row's P entries in column order:
//!
//! * Rademacher: entry is `+1` when the top bit of `next_u32()` is clear,
//!   `-1` otherwise.
//! * Gaussian: entry is a `rand_distr::StandardNormal` draw.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::FeatureStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchFamily {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub target_dim: usize,
    pub family: SketchFamily,
    pub seed: u64,
}

/// Provenance written next to a sketched store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchMeta {
    pub generator: String,
    pub family: SketchFamily,
    pub seed: u64,
    pub source_dim: usize,
    pub target_dim: usize,
}

impl SketchConfig {
    pub fn new(target_dim: usize, family: SketchFamily, seed: u64) -> Self {
        SketchConfig {
            target_dim,
            family,
            seed,
        }
    }

    pub fn meta(&self, source_dim: usize) -> SketchMeta {
        SketchMeta {
            generator: "chacha20/seed_from_u64/stream=sketch-row".to_string(),
            family: self.family,
            seed: self.seed,
            source_dim,
            target_dim: self.target_dim,
        }
    }

    /// Row `i` of the (unscaled) sketching matrix.
    pub fn matrix_row(&self, i: usize, source_dim: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        match self.family {
            SketchFamily::Rademacher => (0..source_dim)
                .map(|_| if rng.next_u32() >> 31 == 0 { 1.0 } else { -1.0 })
                .collect(),
            SketchFamily::Gaussian => (0..source_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        }
    }
}

/// Projects every row of `source` to `cfg.target_dim` dimensions.
///
/// Ids and labels are carried over. The output depends only on
/// `(source, cfg)`, whatever the thread count.
pub fn sketch_features(source: &FeatureStore, cfg: &SketchConfig) -> Result<FeatureStore> {
    let p = source.k();
    let k = cfg.target_dim;
    if k == 0 || k > p {
        return Err(Error::InvalidConfig(format!(
            "sketch dimension {k} must lie in 1..={p}"
        )));
    }
    let scale = 1.0 / (k as f64).sqrt();
    let n = source.n();
    let columns: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let a = cfg.matrix_row(i, p);
            source
                .rows()
                .map(|g| scale * a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>())
                .collect()
        })
        .collect();
    let mut rows = vec![0.0; n * k];
    for (i, col) in columns.iter().enumerate() {
        for (x, v) in col.iter().enumerate() {
            rows[x * k + i] = *v;
        }
    }
    FeatureStore::new(
        k,
        rows,
        source.ids().to_vec(),
        source.labels().map(<[u32]>::to_vec),
    )
}

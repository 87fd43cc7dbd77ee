//! One subset for many queries: multi-query greedy against the sum of
//! per-query top-m scores.
//!
//!     cargo run --release --example coreset

use infotrace::baselines::{additive_aggregate, top_m_by_aggregate};
use infotrace::greedy::multi_query_greedy;
use infotrace::synth::gaussian_store;
use infotrace::{info_gain, ConditioningSet, Criterion, GreedyConfig, NoiseModel, QueryMatrix, QueryVector};

fn main() -> infotrace::Result<()> {
    let store = gaussian_store(800, 16, 5)?;
    let probes = gaussian_store(6, 16, 6)?;
    let queries: Vec<QueryVector> = probes.rows().map(|r| QueryVector::new(r.to_vec())).collect::<Result<_, _>>()?;
    let qm = QueryMatrix::new(queries.clone())?;
    let sigma2 = 0.5;
    let noise = NoiseModel::new(sigma2)?;
    let m = 12;

    let total = |ids: &[u64]| -> infotrace::Result<f64> {
        let set = ConditioningSet::new(ids.to_vec())?;
        queries.iter().map(|q| Ok(info_gain(&store, &set, q, noise)?.value())).sum()
    };

    for criterion in [Criterion::MultiQueryExact, Criterion::MultiQueryApprox] {
        let r = multi_query_greedy(&store, &qm, &GreedyConfig::new(criterion, m, sigma2)?)?;
        println!("{criterion:<18} {:.4} nats over {} queries", total(&r.selected)?, queries.len());
    }

    // Additive baseline: sum squared projections, keep the top m.
    let per_query: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| store.rows().map(|row| infotrace::store::dot(row, q.as_slice()).powi(2)).collect())
        .collect();
    let agg = additive_aggregate(&per_query)?;
    let picked = top_m_by_aggregate(store.ids(), &agg, m);
    println!("{:<18} {:.4} nats", "additive top-m", total(&picked)?);
    Ok(())
}

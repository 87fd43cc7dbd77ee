//! Baseline scorers next to the information criteria on one query.
//!
//!     cargo run --release --example baselines

use infotrace::baselines::{grad_dot, rep_sim};
use infotrace::criteria::relatif_ranking;
use infotrace::synth::gaussian_store;
use infotrace::greedy::attribute;
use infotrace::{Criterion, GreedyConfig, NoiseModel, QueryVector};

fn main() -> infotrace::Result<()> {
    let store = gaussian_store(1000, 24, 2)?;
    let q = QueryVector::new(store.row(10).iter().map(|v| 3.0 * v).collect())?;
    let m = 6;

    println!("grad_dot  {:?}", grad_dot(&store, &q)?.truncated(m).ids());
    println!("rep_sim   {:?}", rep_sim(&store, &q)?.truncated(m).ids());
    println!("relatif   {:?}", relatif_ranking(&store, &q, NoiseModel::new(1.0)?)?.truncated(m).ids());
    for c in [Criterion::InfoGainExact, Criterion::InfoLoss] {
        println!("{:<9} {:?}", c.name(), attribute(&store, &q, &GreedyConfig::new(c, m, 1.0)?)?.selected);
    }
    Ok(())
}

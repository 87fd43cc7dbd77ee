//! Attribute one query with exact InfoGain and with InfoLoss.
//!
//!     cargo run --release --example attribution

use infotrace::synth::gaussian_store;
use infotrace::greedy::attribute;
use infotrace::{Criterion, GreedyConfig, QueryVector};

fn main() -> infotrace::Result<()> {
    let store = gaussian_store(500, 32, 7)?;
    // A query close to example 3 should pull it in first.
    let mut q = store.row(3).to_vec();
    q.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * (i as f64).sin());
    let q = QueryVector::new(q)?;

    for criterion in [Criterion::InfoGainExact, Criterion::InfoLoss] {
        let cfg = GreedyConfig::new(criterion, 8, 1.0)?;
        let r = attribute(&store, &q, &cfg)?;
        println!("{criterion}: total {:.4} nats", r.total_nats());
        for (step, (id, nats)) in r.selected.iter().zip(&r.marginal_nats).enumerate() {
            println!("  {:>2}  id={id:<4} +{nats:.4}", step + 1);
        }
        println!("  fingerprint {}", &r.config_fingerprint[..16]);
    }
    Ok(())
}

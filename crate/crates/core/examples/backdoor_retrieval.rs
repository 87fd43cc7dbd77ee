//! Planted-trigger set: recover the poisoned rows for triggered queries.
//!
//!     cargo run --release --example backdoor_retrieval

use infotrace::baselines::{grad_dot, rep_sim};
use infotrace::retrieval::evaluate;
use infotrace::synth::{backdoor_rankings, synth_backdoor, BackdoorConfig};
use infotrace::{Criterion, QueryVector, Rankings};

fn main() -> infotrace::Result<()> {
    let cfg = BackdoorConfig::default();
    let data = synth_backdoor(&cfg)?;
    let budget = 100;
    println!("N={} K={} poisoned={} queries={}", cfg.n, cfg.k, cfg.n_poison, cfg.n_queries);

    let report = |name: &str, r: &Rankings| -> infotrace::Result<()> {
        let at50 = evaluate(r, &data.truth, 50)?;
        let at100 = evaluate(r, &data.truth, 100)?;
        println!("{name:<18} recall@50 {:.3}  mrr@100 {:.3}", at50.mean_recall, at100.mean_mrr);
        Ok(())
    };

    for sigma2 in [1.0, 1000.0] {
        println!("sigma2 = {sigma2}");
        for c in [Criterion::InfoLoss, Criterion::InfoGainExact, Criterion::InfoGainApprox] {
            report(c.name(), &backdoor_rankings(&data, c, sigma2, budget)?)?;
        }
    }

    let mut gd = Rankings::new();
    let mut rs = Rankings::new();
    for (&qid, row) in data.queries.ids().iter().zip(data.queries.rows()) {
        let q = QueryVector::new(row.to_vec())?;
        gd.insert(qid, grad_dot(&data.train, &q)?.truncated(budget));
        rs.insert(qid, rep_sim(&data.train, &q)?.truncated(budget));
    }
    report("grad_dot", &gd)?;
    report("rep_sim", &rs)?;
    Ok(())
}

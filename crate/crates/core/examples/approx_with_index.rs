//! Approximate InfoGain driven by a squared-inner-product index built from
//! two ordinary MIPS queries per round.
//!
//!     cargo run --release --example approx_with_index

use std::time::Instant;

use infotrace::greedy::{greedy_info_gain_approx, greedy_info_gain_approx_indexed};
use infotrace::retrieval::topk_squared_ip_emulated;
use infotrace::synth::gaussian_store;
use infotrace::{Criterion, FlatIndex, GreedyConfig, QueryVector};

fn main() -> infotrace::Result<()> {
    let store = gaussian_store(20_000, 64, 1)?;
    let q = QueryVector::new(store.row(0).iter().zip(store.row(1)).map(|(a, b)| a - b).collect())?;
    let index = FlatIndex::build(&store);

    let top = topk_squared_ip_emulated(&index, &q, 5)?;
    println!("top-5 by (phi' q)^2: {:?}", top.ids());

    let cfg = GreedyConfig::new(Criterion::InfoGainApprox, 25, 10.0)?;
    let t = Instant::now();
    let scan = greedy_info_gain_approx(&store, &q, &cfg)?;
    let scan_time = t.elapsed();
    let t = Instant::now();
    let indexed = greedy_info_gain_approx_indexed(&store, &q, &cfg, &index)?;
    println!(
        "full scan {scan_time:.2?}, index {:.2?}, same selection: {}",
        t.elapsed(),
        scan.selected == indexed.selected
    );
    println!("first picks {:?}", &indexed.selected[..8]);
    Ok(())
}

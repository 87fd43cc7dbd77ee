//! InfoLoss picks what the rest of the data cannot replace; InfoGain picks
//! what explains the query on its own. Duplicated rows separate the two.
//!
//!     cargo run --release --example info_loss_vs_gain

use infotrace::{info_gain, info_loss, ConditioningSet, Criterion, FeatureStore, GreedyConfig, NoiseModel, QueryVector};

fn main() -> infotrace::Result<()> {
    // Rows 0..3 are copies of the query direction, row 3 is a unique
    // weaker match, the rest are noise directions.
    let rows = vec![
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.6, 0.8, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let store = FeatureStore::from_rows(&rows)?;
    let q = QueryVector::new(vec![1.0, 0.5, 0.0])?;
    let sigma2 = 0.1;
    let noise = NoiseModel::new(sigma2)?;

    for criterion in [Criterion::InfoGainExact, Criterion::InfoLoss] {
        let r = infotrace::greedy::attribute(&store, &q, &GreedyConfig::new(criterion, 2, sigma2)?)?;
        let set = ConditioningSet::new(r.selected.clone())?;
        println!(
            "{criterion:<16} picks {:?}  gain {:.4}  loss {:.4}",
            r.selected,
            info_gain(&store, &set, &q, noise)?.value(),
            info_loss(&store, &set, &q, noise)?.value()
        );
    }
    Ok(())
}

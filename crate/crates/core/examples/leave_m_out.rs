//! Query variance after dropping a set of examples, from one factorization
//! of the full Gram matrix instead of a refit.
//!
//!     cargo run --release --example leave_m_out

use infotrace::oracle::dense_variance;
use infotrace::synth::gaussian_store;
use infotrace::{ConditioningSet, NoiseModel, QueryVector, Surrogate};

fn main() -> infotrace::Result<()> {
    let store = gaussian_store(300, 20, 11)?;
    let q = QueryVector::new(store.row(0).to_vec())?;
    let noise = NoiseModel::new(0.2)?;
    let gp = Surrogate::new(&store, noise);
    let everything = ConditioningSet::all(&store);
    println!("v(D) = {:.6}", gp.posterior_variance(&everything, &q)?);

    for removed in [vec![0u64], vec![0, 1, 2], (0..25).collect()] {
        let set = ConditioningSet::new(removed.clone())?;
        let fast = gp.leave_m_out_variance(&set, &q)?;
        let kept: Vec<usize> = (0..store.n()).filter(|p| !removed.contains(&store.id(*p))).collect();
        let refit = dense_variance(&store, &kept, q.as_slice(), noise.sigma2())?;
        println!("drop {:>2}: v = {fast:.6}  refit {refit:.6}", removed.len());
    }
    Ok(())
}

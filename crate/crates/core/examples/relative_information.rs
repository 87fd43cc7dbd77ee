//! How much of the greedy-InfoLoss information the gain selectors recover
//! as the noise level moves relative to the largest Gram eigenvalue.
//!
//!     cargo run --release --example relative_information

use infotrace::oracle::gram_lambda_max;
use infotrace::synth::{power_law_instance, relinfo_sweep};

fn main() -> infotrace::Result<()> {
    for decay in [0.0, 1.0] {
        let (store, q) = power_law_instance(400, 48, decay, 0)?;
        let lambda = gram_lambda_max(&store);
        let grid: Vec<f64> = (-4..=6).map(|e| lambda * 10f64.powf(e as f64 / 2.0)).collect();
        println!("spectrum decay {decay}, lambda_max {lambda:.2}");
        println!("  sigma2/lambda   exact   approx");
        for row in relinfo_sweep(&store, &q, &grid, &[15])? {
            println!("  {:>12.3e}  {:.4}  {:.4}", row.noise_ratio, row.gain_exact, row.gain_approx);
        }
    }
    Ok(())
}

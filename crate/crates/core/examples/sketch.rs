//! Random projection of wide features, and how well it keeps inner products.
//!
//!     cargo run --release --example sketch

use infotrace::store::dot;
use infotrace::synth::gaussian_store;
use infotrace::{sketch_features, SketchConfig, SketchFamily};

fn main() -> infotrace::Result<()> {
    let wide = gaussian_store(200, 2048, 3)?;
    for family in [SketchFamily::Rademacher, SketchFamily::Gaussian] {
        for k in [32, 128, 512] {
            let narrow = sketch_features(&wide, &SketchConfig::new(k, family, 42))?;
            let mut worst = 0.0f64;
            let mut sq = 0.0;
            let mut count = 0.0;
            for i in 0..50 {
                for j in (i + 1)..50 {
                    let err = dot(narrow.row(i), narrow.row(j)) - dot(wide.row(i), wide.row(j));
                    worst = worst.max(err.abs());
                    sq += err * err;
                    count += 1.0;
                }
            }
            println!(
                "{family:?} K={k:<4} rms error {:.4} (1/sqrt(K) = {:.4}), worst {worst:.4}",
                (sq / count).sqrt(),
                1.0 / (k as f64).sqrt()
            );
        }
    }
    Ok(())
}

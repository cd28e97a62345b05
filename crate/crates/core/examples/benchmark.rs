//! The full comparison: eight methods on three objects over five seeds,
//! with paired t-tests and covariate-shift distances.
//!
//! ```text
//! cargo run --release -p finemanip --example benchmark -- [out_dir] [seeds]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use finemanip::bench::{run_benchmark, BenchConfig};

fn main() -> finemanip::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "bench-out".into()));
    let mut cfg = BenchConfig::default();
    if let Some(seeds) = args.next().and_then(|s| s.parse().ok()) {
        cfg.seeds = seeds;
    }
    let start = Instant::now();
    let report = run_benchmark(&cfg, |line| eprintln!("[{:>6.1}s] {line}", start.elapsed().as_secs_f64()))?;
    print!("{}", report.summary());
    for path in report.write(&out)? {
        println!("wrote {}", path.display());
    }
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}

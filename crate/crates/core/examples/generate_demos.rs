//! Generate scripted demonstrations for each object, report their length
//! statistics, and check hardware repeatability with open-loop replay.
//!
//! ```text
//! cargo run --release -p finemanip --example generate_demos -- [n_demos]
//! ```

use finemanip::sim::{generate_demos, replay_all, ObjectKind, SimConfig};

fn main() -> finemanip::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    for kind in ObjectKind::ALL {
        let cfg = SimConfig::for_object(kind);
        let demos = generate_demos(&cfg, n, 1)?;
        let lens: Vec<usize> = demos.trajectories().iter().map(|t| t.len()).collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        let replay = replay_all(&demos, &cfg, 2)?;
        println!(
            "{kind:>6}: {} demos, length mean {mean:.0} (min {}, max {}), replay success {:.3}",
            demos.len(),
            lens.iter().min().unwrap(),
            lens.iter().max().unwrap(),
            replay.success_rate()
        );
    }
    Ok(())
}

//! Noise injection on a training batch: which states move, by how much, and
//! why the labels stay put.
//!
//! ```text
//! cargo run --release -p finemanip --example noise_injection -- [eta]
//! ```

use finemanip::data::{inject_noise, NoiseConfig, STATE_DIM};
use finemanip::geometry::FrameTag;
use finemanip::sim::{generate_demos, ObjectKind, SimConfig};

const NAMES: [&str; STATE_DIM] = ["x", "y", "z", "qw", "qx", "qy", "qz", "open", "ox", "oy", "oz"];

fn main() -> finemanip::Result<()> {
    let eta: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let demos = generate_demos(&SimConfig::for_object(ObjectKind::Cube), 50, 1)?.in_frame(FrameTag::ObjectCentric)?;
    let stats = demos.stats()?;
    let batch: Vec<_> = demos.pairs().map(|(s, a)| (*s, *a)).collect();

    let cfg = NoiseConfig::new(eta, 42);
    let noisy = inject_noise(&batch, &cfg, stats)?;
    let moved = batch.iter().zip(&noisy).filter(|(a, b)| a.0 != b.0).count();
    let labels_kept = batch.iter().zip(&noisy).all(|(a, b)| a.1 == b.1);
    println!(
        "eta {eta}: {moved}/{} states perturbed ({:.1}%), labels unchanged: {labels_kept}",
        batch.len(),
        100.0 * moved as f64 / batch.len() as f64
    );

    // Empirical spread of the perturbation on the moved states.
    let expected = cfg.noise_std(stats);
    let mut sq = [0.0; STATE_DIM];
    for (a, b) in batch.iter().zip(&noisy).filter(|(a, b)| a.0 != b.0) {
        let (x, y) = (a.0.to_array(), b.0.to_array());
        for d in 0..STATE_DIM {
            sq[d] += (y[d] - x[d]).powi(2);
        }
    }
    println!("{:>5} {:>12} {:>12}", "dim", "expected", "measured");
    for d in 0..STATE_DIM {
        println!("{:>5} {:>12.3e} {:>12.3e}", NAMES[d], expected[d], (sq[d] / moved as f64).sqrt());
    }
    println!("(quaternion components are renormalized after the shift, so they drift from the raw figure)");
    Ok(())
}

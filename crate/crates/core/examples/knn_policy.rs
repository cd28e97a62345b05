//! Non-parametric k-NN control: build the exact index, check it against a
//! linear scan, and compare robot- vs. object-centric features in closed loop.
//!
//! ```text
//! cargo run --release -p finemanip --example knn_policy -- [object] [demos]
//! ```

use std::time::Instant;

use finemanip::geometry::FrameTag;
use finemanip::knn::{trajectory_features, KnnConfig, KnnIndex, KnnPolicy};
use finemanip::policy::in_world_frame;
use finemanip::sim::{evaluate_grid, generate_demos, ObjectKind, RolloutOptions, SimConfig};

fn main() -> finemanip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let object: ObjectKind = args.first().map_or(Ok(ObjectKind::Ball20), |s| s.parse())?;
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let cfg = SimConfig::for_object(object);
    let demos = generate_demos(&cfg, n, 1)?;

    for frame in [FrameTag::RobotCentric, FrameTag::ObjectCentric] {
        let set = demos.in_frame(frame)?;
        let t0 = Instant::now();
        let index = KnnIndex::from_demos(&set, &KnnConfig::default())?;
        let built = t0.elapsed().as_secs_f64();

        // Spot-check exactness on features of a held-out demonstration.
        let probe = generate_demos(&cfg, 1, 999)?.in_frame(frame)?;
        let queries: Vec<_> = probe.trajectories().iter().flat_map(trajectory_features).map(|(f, _)| f).collect();
        let exact = queries
            .iter()
            .all(|q| index.query(q).iter().map(|nb| nb.id).eq(index.brute_force(q, index.k()).iter().map(|nb| nb.id)));

        let mut policy = in_world_frame(KnnPolicy::new(index))?;
        let report = evaluate_grid(policy.as_mut(), &cfg.with_seed(10_001), 5, 1, RolloutOptions::default())?;
        println!(
            "{frame:>6}: {} features, built in {built:.2}s, matches brute force on {} queries: {exact}, success {:.2}",
            set.total_steps(),
            queries.len(),
            report.success_rate()
        );
    }
    Ok(())
}

//! BC + k-NN ensemble: the network drives while the state looks like the
//! demonstrations, k-NN takes over when the mean neighbour distance passes
//! alpha. Alpha comes from leave-one-out distances on the demos.
//!
//! ```text
//! cargo run --release -p finemanip --example ensemble -- [object] [quantile]
//! ```

use finemanip::bc::{train, TrainConfig};
use finemanip::bench::BenchConfig;
use finemanip::data::NoiseConfig;
use finemanip::ensemble::{calibrate_alpha, leave_one_out_distances, quantile, EnsembleConfig, EnsemblePolicy};
use finemanip::geometry::FrameTag;
use finemanip::knn::{KnnConfig, KnnIndex};
use finemanip::policy::WorldFrame;
use finemanip::sim::{evaluate_grid, generate_demos, ObjectKind, RolloutOptions, SimConfig};

fn main() -> finemanip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let object: ObjectKind = args.first().map_or(Ok(ObjectKind::Ball14), |s| s.parse())?;
    let q: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.99);
    let cfg = SimConfig::for_object(object);
    let demos = generate_demos(&cfg, 100, 1)?.in_frame(FrameTag::ObjectCentric)?;

    let bench = BenchConfig::default();
    let net = train(&demos, &TrainConfig { noise: Some(NoiseConfig::new(bench.noise_eta, 1)), seed: 1, ..bench.train })?.network;
    let index = KnnIndex::from_demos(&demos, &KnnConfig::default())?;

    let loo = leave_one_out_distances(&index, &demos)?;
    println!(
        "leave-one-out mean k-NN distance: median {:.3}, q90 {:.3}, q99 {:.3}, max {:.3}",
        quantile(&loo, 0.5)?,
        quantile(&loo, 0.9)?,
        quantile(&loo, 0.99)?,
        quantile(&loo, 1.0)?
    );
    let alpha = calibrate_alpha(&index, &demos, q)?;

    let mut policy = WorldFrame::new(EnsemblePolicy::new(net, index, EnsembleConfig { alpha })?)?;
    let report = evaluate_grid(&mut policy, &cfg.with_seed(10_001), 5, 1, RolloutOptions::default())?;
    println!(
        "alpha {alpha:.3} (q = {q}): success {:.2}, k-NN took over in {:.0}% of episodes",
        report.success_rate(),
        100.0 * policy.inner().knn_episode_fraction().unwrap_or(0.0)
    );
    Ok(())
}

//! How far do learned agents wander from the demonstrations? Rolls out
//! BC with and without noise injection and k-NN, then reports the mean and
//! 95th-percentile distance from each visited state to its nearest demo
//! state, and writes the 2-D PCA point clouds for plotting.
//!
//! ```text
//! cargo run --release -p finemanip --example covariate_shift -- [object] [out.csv]
//! ```

use finemanip::analysis::{flatten_states, pca_fit, shift_metric};
use finemanip::bc::train;
use finemanip::bench::BenchConfig;
use finemanip::data::{NoiseConfig, Trajectory};
use finemanip::geometry::FrameTag;
use finemanip::knn::{KnnConfig, KnnIndex, KnnPolicy};
use finemanip::policy::{in_world_frame, Policy};
use finemanip::sim::{evaluate_grid, generate_demos, ObjectKind, RolloutOptions, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let object: ObjectKind = args.first().map_or(Ok(ObjectKind::Cube), |s| s.parse())?;
    let out = args.get(1).cloned().unwrap_or_else(|| "shift.csv".into());
    let cfg = SimConfig::for_object(object);
    let demos = generate_demos(&cfg, 100, 2)?.in_frame(FrameTag::ObjectCentric)?;
    let pca = pca_fit(&flatten_states(demos.trajectories()), 2)?;
    println!(
        "PCA: 2 components explain {:.0}% of the standardized variance",
        100.0 * pca.explained_variance.iter().sum::<f64>() / pca.total_variance
    );

    let bench = BenchConfig::default();
    let clean = bench.train.clone();
    let noisy = finemanip::bc::TrainConfig { noise: Some(NoiseConfig::new(bench.noise_eta, 2)), ..bench.train.clone() };
    let agents: Vec<(&str, Box<dyn Policy>)> = vec![
        ("BC+ObjC", in_world_frame(train(&demos, &clean)?.network)?),
        ("BC+ObjC+Noise", in_world_frame(train(&demos, &noisy)?.network)?),
        ("kNN+ObjC", in_world_frame(KnnPolicy::new(KnnIndex::from_demos(&demos, &KnnConfig::default())?))?),
    ];

    let mut csv = String::new();
    for (name, mut policy) in agents {
        let report = evaluate_grid(policy.as_mut(), &cfg.with_seed(10_002), 5, 1, RolloutOptions { record: true })?;
        let rollouts: Vec<Trajectory> = report.rollouts.iter().map(Trajectory::to_object_frame).collect::<finemanip::Result<_>>()?;
        let shift = shift_metric(name, &demos, &rollouts, &pca)?;
        println!(
            "{name:>14}: success {:.2}, nearest-demo distance mean {:.3} p95 {:.3}",
            report.success_rate(),
            shift.mean_nn_distance,
            shift.p95_nn_distance
        );
        let rows = shift.point_cloud_csv(csv.is_empty());
        csv.push_str(&rows);
    }
    std::fs::write(&out, csv)?;
    println!("wrote {out}");
    Ok(())
}

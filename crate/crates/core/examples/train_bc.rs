//! Train robot-centric and object-centric BC policies on scripted demos and
//! score both on the evaluation grid.
//!
//!     cargo run --release --example train_bc -- [object] [eta]

use std::time::Instant;

use finemanip::bc::{train, TrainConfig};
use finemanip::bench::BenchConfig;
use finemanip::data::NoiseConfig;
use finemanip::geometry::FrameTag;
use finemanip::policy::in_world_frame;
use finemanip::sim::{evaluate_grid, generate_demos, ObjectKind, RolloutOptions, SimConfig};

fn main() -> finemanip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let object: ObjectKind = args.first().map_or(Ok(ObjectKind::Cube), |s| s.parse())?;
    // 0 trains on clean states only
    let eta: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let cfg = SimConfig::for_object(object);
    let demos = generate_demos(&cfg, 100, 1)?;
    println!("{} demos, {} steps", demos.len(), demos.total_steps());

    for frame in [FrameTag::RobotCentric, FrameTag::ObjectCentric] {
        let set = demos.in_frame(frame)?;
        let t0 = Instant::now();
        let noise = (eta > 0.0).then(|| NoiseConfig::new(eta, 3));
        let tcfg = TrainConfig { noise, seed: 7, ..BenchConfig::default().train };
        let out = train(&set, &tcfg)?;
        let trained = t0.elapsed();
        let mut policy = in_world_frame(out.network)?;
        let report = evaluate_grid(&mut policy, &cfg.with_seed(99), 5, 2, RolloutOptions::default())?;
        println!(
            "{frame:>6}: final loss {:.4} ({:.1}s), success {:.2}",
            out.loss_trace.last().unwrap(),
            trained.as_secs_f64(),
            report.success_rate()
        );
    }
    Ok(())
}

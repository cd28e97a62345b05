//! Robot-centric vs. object-centric coordinates.
//!
//! The same demonstration looks different in the robot frame for every
//! object placement, but collapses onto one path once expressed relative
//! to the object. This prints a few states both ways and measures how far
//! apart two demos are in each frame.
//!
//! ```text
//! cargo run --release -p finemanip --example frame_transform
//! ```

use finemanip::data::Trajectory;
use finemanip::geometry::{dist3, from_object_frame, to_object_frame, FrameTag};
use finemanip::sim::{generate_demos, ObjectKind, SimConfig};

/// Mean distance between the final approach of two trajectories
/// (last `n` steps before the grasp, aligned from the end).
fn tail_gap(a: &Trajectory, b: &Trajectory, n: usize) -> f64 {
    let n = n.min(a.len()).min(b.len());
    let sa = &a.steps[a.len() - n..];
    let sb = &b.steps[b.len() - n..];
    sa.iter()
        .zip(sb)
        .map(|(x, y)| dist3(x.state.pose.position, y.state.pose.position))
        .sum::<f64>()
        / n as f64
}

fn main() -> finemanip::Result<()> {
    let cfg = SimConfig::for_object(ObjectKind::Ball14);
    let robot = generate_demos(&cfg, 2, 5)?;
    let object = robot.in_frame(FrameTag::ObjectCentric)?;

    let step = &robot.trajectories()[0].steps[0];
    let rel = to_object_frame(&step.state)?;
    println!("robot frame : tip {:?} object {:?}", step.state.pose.position, step.state.object_position);
    println!("object frame: tip {:?} object {:?}", rel.pose.position, rel.object_position);

    // Actions go back to the robot frame with the world object position.
    let cmd = object.trajectories()[0].steps[0].action;
    let back = from_object_frame(&cmd, step.state.object_position)?;
    println!(
        "action round trip error {:.2e} m",
        dist3(back.target.position, step.action.target.position)
    );

    let [a, b] = [0, 1].map(|i| &robot.trajectories()[i]);
    let [oa, ob] = [0, 1].map(|i| &object.trajectories()[i]);
    println!(
        "objects {:.0} mm apart; last 100 steps differ by {:.1} mm (robot) vs {:.1} mm (object)",
        dist3(a.initial_object_position().unwrap(), b.initial_object_position().unwrap()) * 1e3,
        tail_gap(a, b, 100) * 1e3,
        tail_gap(oa, ob, 100) * 1e3
    );
    Ok(())
}

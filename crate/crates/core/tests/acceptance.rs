//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criterion 8/9 run the full benchmark
//! (several minutes); set `FINEMANIP_SKIP_BENCH=1` to skip them.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finemanip::analysis::{paired_t_test, TestFlag};
use finemanip::bc::{grad_check, mean_loss, train, Activation, LossWeights, Mlp, TrainConfig, HIDDEN};
use finemanip::bench::{run_benchmark, BenchConfig, BenchmarkReport, Method};
use finemanip::data::{inject_noise, Action, DemoSet, NoiseConfig, State, Step, Trajectory, ACTION_DIM, STATE_DIM};
use finemanip::ensemble::{calibrate_alpha, Branch, EnsembleConfig, EnsemblePolicy};
use finemanip::geometry::{
    action_to_object_frame, dist3, from_object_frame, quat_distance, state_from_object_frame, to_object_frame, FrameTag,
    Pose, Quat,
};
use finemanip::knn::{trajectory_features, KnnConfig, KnnFeature, KnnIndex};
use finemanip::policy::WorldFrame;
use finemanip::sim::{evaluate_grid, generate_demos, replay_all, reset, ExpertPolicy, ObjectKind, RolloutOptions, SimConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: finemanip::Error) -> String {
    e.to_string()
}

fn random_quat(rng: &mut impl Rng) -> Quat {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    Quat::from_axis_angle(axis, rng.random_range(0.0..std::f64::consts::PI))
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let p = [rng.random_range(0.1..0.5), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.2)];
    Pose::new(p, random_quat(rng), rng.random_range(0.0..1.0)).unwrap()
}

fn shifted(p: &Pose, d: [f64; 3]) -> Pose {
    p.translated(d)
}

// ---------------------------------------------------------------------------

fn geometry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rt = 0.0f64;
    for _ in 0..10_000 {
        let obj = [rng.random_range(0.2..0.4), rng.random_range(-0.1..0.1), 0.007];
        let s = State { pose: random_pose(&mut rng), object_position: obj, frame: FrameTag::RobotCentric };
        let back = state_from_object_frame(&to_object_frame(&s).map_err(err)?, obj).map_err(err)?;
        let a = Action { target: random_pose(&mut rng), frame: FrameTag::RobotCentric };
        let a2 = from_object_frame(&action_to_object_frame(&a, obj).map_err(err)?, obj).map_err(err)?;
        worst_rt = worst_rt
            .max(dist3(back.pose.position, s.pose.position))
            .max(dist3(back.object_position, s.object_position))
            .max(dist3(a2.target.position, a.target.position));
        ensure(back.pose.orientation == s.pose.orientation && a2.target.opening == a.target.opening, || "round trip changed orientation/opening".into())?;
    }
    ensure(worst_rt <= 1e-12, || format!("frame round trip error {worst_rt:e}"))?;

    let mut worst_q = 0.0f64;
    for _ in 0..10_000 {
        let (q1, q2) = (random_quat(&mut rng), random_quat(&mut rng));
        let d = quat_distance(&q1, &q2).map_err(err)?;
        for (a, b) in [(q1.neg(), q2), (q1, q2.neg()), (q1.neg(), q2.neg())] {
            worst_q = worst_q.max((quat_distance(&a, &b).map_err(err)? - d).abs());
        }
    }
    ensure(worst_q == 0.0, || format!("double cover changes quat_distance by {worst_q:e}"))?;

    // Translating the whole scene translates the object-centric commands.
    let cfg = SimConfig::for_object(ObjectKind::Cube);
    let demos = generate_demos(&cfg, 5, 3).map_err(err)?.in_frame(FrameTag::ObjectCentric).map_err(err)?;
    let index = KnnIndex::from_demos(&demos, &KnnConfig::default()).map_err(err)?;
    let net = train(&demos, &TrainConfig { epochs: 2, stride: 4, seed: 1, ..TrainConfig::default() }).map_err(err)?.network;
    let (mut worst_knn, mut worst_bc) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let obj = [rng.random_range(0.2..0.4), rng.random_range(-0.1..0.1), 0.007];
        let d = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0];
        let poses = [0; 3].map(|_| random_pose(&mut rng));
        let knn_cmd = |o: [f64; 3], delta: [f64; 3]| -> Result<Action, String> {
            let rel = poses.map(|p| shifted(&p, delta).translated([-o[0] - delta[0], -o[1] - delta[1], -o[2] - delta[2]]));
            let a = index.predict(&KnnFeature::new(rel, [0.0; 3]));
            let world = [o[0] + delta[0], o[1] + delta[1], o[2] + delta[2]];
            from_object_frame(&a, world).map_err(err)
        };
        let (a0, a1) = (knn_cmd(obj, [0.0; 3])?, knn_cmd(obj, d)?);
        worst_knn = worst_knn.max(dist3(a1.target.position, shifted(&a0.target, d).position));

        let bc_cmd = |delta: [f64; 3]| -> Result<Action, String> {
            let o = [obj[0] + delta[0], obj[1] + delta[1], obj[2] + delta[2]];
            let s = State { pose: shifted(&poses[2], delta), object_position: o, frame: FrameTag::RobotCentric };
            let a = net.predict(&to_object_frame(&s).map_err(err)?).map_err(err)?;
            from_object_frame(&a, o).map_err(err)
        };
        let (b0, b1) = (bc_cmd([0.0; 3])?, bc_cmd(d)?);
        worst_bc = worst_bc
            .max(dist3(b1.target.position, shifted(&b0.target, d).position))
            .max((b1.target.opening - b0.target.opening).abs());
    }
    ensure(worst_knn <= 1e-14, || format!("object-centric k-NN not equivariant: {worst_knn:e}"))?;
    ensure(worst_bc <= 1e-9, || format!("object-centric BC not equivariant: {worst_bc:e}"))?;
    Ok(format!(
        "round trip {worst_rt:.1e}, double cover {worst_q:.1e}, k-NN equivariance {worst_knn:.1e}, BC {worst_bc:.1e}"
    ))
}

fn noise() -> Check {
    let demos = generate_demos(&SimConfig::for_object(ObjectKind::Ball20), 20, 4).map_err(err)?;
    let stats = demos.stats().map_err(err)?;
    let batch: Vec<(State, Action)> = demos.pairs().map(|(s, a)| (*s, *a)).collect();
    let eta = 0.01;
    let mut sq = [0.0; STATE_DIM];
    let mut n = 0usize;
    let mut seed = 0;
    while n < 100_000 {
        let cfg = NoiseConfig { fraction: 1.0, ..NoiseConfig::new(eta, seed) };
        seed += 1;
        let noisy = inject_noise(&batch, &cfg, stats).map_err(err)?;
        ensure(noisy.iter().zip(&batch).all(|(x, y)| x.1 == y.1), || "an action label changed".into())?;
        for (x, y) in noisy.iter().zip(&batch) {
            let (a, b) = (x.0.to_array(), y.0.to_array());
            for d in 0..STATE_DIM {
                sq[d] += (a[d] - b[d]).powi(2);
            }
            n += 1;
        }
    }
    // The quaternion block is renormalized after the shift; the oracle
    // applies to the Euclidean coordinates.
    let expected: Vec<f64> = stats.variance.iter().map(|v| (eta * v).sqrt()).collect();
    let mut worst = 0.0f64;
    for d in [0, 1, 2, 7, 8, 9] {
        let measured = (sq[d] / n as f64).sqrt();
        let rel = (measured - expected[d]).abs() / expected[d];
        worst = worst.max(rel);
    }
    ensure(worst < 0.05, || format!("noise std off by {:.1}%", worst * 100.0))?;
    Ok(format!("{n} samples, worst per-dimension std error {:.2}%, labels bit-identical", worst * 100.0))
}

fn bc_training() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sizes = vec![STATE_DIM];
    sizes.extend_from_slice(&HIDDEN);
    sizes.push(ACTION_DIM);
    let mlp = Mlp::init(&sizes, Activation::Relu, &mut rng);
    let input: Vec<f64> = (0..STATE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
    let target: [f64; ACTION_DIM] = std::array::from_fn(|i| if (3..7).contains(&i) { 0.5 } else { rng.random_range(-1.0..1.0) });
    let components = [
        ("position", LossWeights { w_pos: 1.0, w_rot: 0.0, w_open: 0.0 }),
        ("rotation", LossWeights { w_pos: 0.0, w_rot: 1.0, w_open: 0.0 }),
        ("opening", LossWeights { w_pos: 0.0, w_rot: 0.0, w_open: 1.0 }),
    ];
    let mut worst = 0.0f64;
    for (name, w) in components {
        let idx: Vec<usize> = (0..100).map(|_| rng.random_range(0..mlp.param_count())).collect();
        let g = grad_check(&mlp, &input, &target, &w, &idx).map_err(err)?;
        ensure(g.checked > 50, || format!("{name}: only {} parameters away from kinks", g.checked))?;
        worst = worst.max(g.max_rel_error);
    }
    ensure(worst < 1e-4, || format!("gradient check error {worst:e}"))?;

    let q = Quat::from_yaw_tilt(0.1, 0.3);
    let state = State { pose: Pose::new([0.25, 0.02, 0.08], q, 0.6).unwrap(), object_position: [0.3, 0.0, 0.005], frame: FrameTag::RobotCentric };
    let action = Action { target: Pose::new([0.251, 0.02, 0.079], q, 0.55).unwrap(), frame: FrameTag::RobotCentric };
    let steps = (0..2).map(|i| Step { t: i as f64 * 0.01, state, action }).collect();
    let single = DemoSet::new(FrameTag::RobotCentric, vec![Trajectory { id: "one".into(), steps, success: true, object_radius: 0.005 }]).map_err(err)?;
    let cfg = TrainConfig { epochs: 50, batch_size: 1, learning_rate: 1e-2, seed: 3, ..TrainConfig::default() };
    let loss = mean_loss(&train(&single, &cfg).map_err(err)?.network, &single).map_err(err)?;
    ensure(loss < 1e-6, || format!("single-pair loss {loss:e} after 50 epochs"))?;

    let demos = generate_demos(&SimConfig::for_object(ObjectKind::Cube), 3, 2).map_err(err)?;
    let cfg = TrainConfig { epochs: 2, seed: 11, noise: Some(NoiseConfig::new(0.01, 4)), ..TrainConfig::default() };
    let (a, b) = (train(&demos, &cfg).map_err(err)?, train(&demos, &cfg).map_err(err)?);
    ensure(a.network.mlp.params == b.network.mlp.params, || "same seed gave different parameters".into())?;
    Ok(format!("grad check max rel error {worst:.1e}, single-pair loss {loss:.1e}, seed-deterministic"))
}

fn knn() -> Check {
    let demos = generate_demos(&SimConfig::for_object(ObjectKind::Ball14), 20, 6).map_err(err)?.in_frame(FrameTag::ObjectCentric).map_err(err)?;
    let index = KnnIndex::from_demos(&demos, &KnnConfig::default()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_d = 0.0f64;
    for _ in 0..1000 {
        let base = index.feature(rng.random_range(0..index.len()));
        let poses = base.poses.map(|p| {
            let j = [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.01..0.01)];
            let q = random_quat(&mut rng);
            Pose::sanitized(p.translated(j).position, if rng.random_bool(0.5) { q } else { p.orientation }, (p.opening + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
        });
        let f = KnnFeature::new(poses, base.object_position);
        let (fast, slow) = (index.query(&f), index.brute_force(&f, index.k()));
        ensure(fast.iter().map(|n| n.id).eq(slow.iter().map(|n| n.id)), || "kd-tree neighbours differ from brute force".into())?;
        for (a, b) in fast.iter().zip(&slow) {
            worst_d = worst_d.max((a.distance - b.distance).abs());
        }
        let pred = index.predict(&f).target;
        for d in 0..3 {
            let vals: Vec<f64> = fast.iter().map(|n| index.label(n.id).target.position[d]).collect();
            let (lo, hi) = (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            ensure(pred.position[d] >= lo && pred.position[d] <= hi, || "prediction outside neighbour hull".into())?;
        }
        let opens: Vec<f64> = fast.iter().map(|n| index.label(n.id).target.opening).collect();
        ensure(opens.iter().any(|&o| o <= pred.opening) && opens.iter().any(|&o| o >= pred.opening), || "opening outside neighbour hull".into())?;
    }
    ensure(worst_d <= 1e-12, || format!("distance mismatch {worst_d:e}"))?;

    let mut hits = 0;
    for id in (0..index.len()).step_by(97) {
        let nn = index.query_k(index.feature(id), 2).map_err(err)?;
        if nn[1].distance == 0.0 {
            continue; // duplicate feature: the label is ambiguous
        }
        let a = index.predict(index.feature(id)).target;
        let stored = index.label(id).target;
        let q_err = quat_distance(&a.orientation, &stored.orientation).map_err(err)?;
        ensure(a.position == stored.position && a.opening == stored.opening && q_err < 1e-12, || format!("exact hit {id} not reproduced"))?;
        hits += 1;
    }
    Ok(format!("1000 queries match brute force (max distance diff {worst_d:.1e}), convex bound holds, {hits} exact hits reproduce labels"))
}

fn ensemble() -> Check {
    let cfg = SimConfig::for_object(ObjectKind::Ball20);
    let demos = generate_demos(&cfg, 100, 1).map_err(err)?.in_frame(FrameTag::ObjectCentric).map_err(err)?;
    let index = KnnIndex::from_demos(&demos, &KnnConfig::default()).map_err(err)?;
    let bench = BenchConfig::default();
    let tcfg = TrainConfig { seed: 1, noise: Some(NoiseConfig::new(bench.noise_eta, 1)), ..bench.train.clone() };
    let net = train(&demos, &tcfg).map_err(err)?.network;

    let traj = &demos.trajectories()[0];
    let (f, _) = trajectory_features(traj)[100];
    let nn = index.query(&f);
    let mean = nn.iter().map(|n| n.distance).sum::<f64>() / nn.len() as f64;
    for (alpha, want) in [(mean, Branch::Knn), (mean.next_up(), Branch::Bc)] {
        let mut p = EnsemblePolicy::new(net.clone(), index.clone(), EnsembleConfig { alpha }).map_err(err)?;
        p.act_on(&traj.steps[100].state, &f).map_err(err)?;
        ensure(p.switch_log()[0].branch == want, || format!("alpha {alpha} picked {:?}", p.switch_log()[0].branch))?;
    }

    let full = calibrate_alpha(&index, &demos, 1.0).map_err(err)?;
    let mut p = EnsemblePolicy::new(net.clone(), index.clone(), EnsembleConfig { alpha: full }).map_err(err)?;
    for t in demos.trajectories() {
        for (s, (f, _)) in t.steps.iter().zip(trajectory_features(t)) {
            p.act_on(&s.state, &f).map_err(err)?;
        }
    }
    ensure(p.switch_log().iter().all(|r| r.branch == Branch::Bc), || "quantile 1.0 left some demo state on k-NN".into())?;

    let alpha = calibrate_alpha(&index, &demos, bench.alpha_quantile).map_err(err)?;
    let mut p = WorldFrame::new(EnsemblePolicy::new(net, index, EnsembleConfig { alpha }).map_err(err)?).map_err(err)?;
    let report = evaluate_grid(&mut p, &cfg.with_seed(10_001), 5, 1, RolloutOptions::default()).map_err(err)?;
    let fired = p.inner().knn_episode_fraction().unwrap_or(0.0);
    ensure(fired >= 0.8, || format!("k-NN fired in only {:.0}% of rollouts", fired * 100.0))?;
    Ok(format!(
        "strict boundary at mean distance, quantile 1.0 keeps demos on BC, k-NN fired in {:.0}% of {} rollouts (success {:.2})",
        fired * 100.0,
        report.episodes.len(),
        report.success_rate()
    ))
}

/// `(a, b, t, p)` computed with 50-digit arithmetic.
#[rustfmt::skip]
const T_CASES: [(&[f64], &[f64], f64, f64); 20] = [
    (&[0.32, 0.15], &[-0.23, -0.41], 111.0, 0.005735158108498183),
    (&[0.54, 0.37, 0.06], &[0.38, 0.27, -0.11], 6.557438524302, 0.022474780092321324),
    (&[0.09, 0.42, 0.83, 0.12], &[-0.18, 0.17, 0.81, 0.07], 2.2564712724978344, 0.10928183789030191),
    (&[0.4, 0.98, 0.05, 0.86, 0.29], &[0.12, 0.84, -0.07, 0.53, 0.43], 1.7815479346563372, 0.14941451165489764),
    (&[0.18, 0.58, 0.64, 0.37, 0.55], &[0.19, 0.56, 0.67, 0.61, 0.34], -0.13961796943056518, 0.8957096079079354),
    (&[0.59, 0.45, 0.3, 0.79, 0.7], &[-0.33, -0.54, -0.44, -0.61, -0.36], 9.422657119307233, 0.0007071831759865864),
    (&[0.73, 0.29, 0.98, 0.12, 0.42, 0.76], &[0.84, 0.46, 1.25, 0.17, 0.42, 0.48], -0.6929069418092894, 0.5192280631693591),
    (&[0.88, 0.31, 0.7, 0.59, 0.58, 0.46, 0.84, 0.94], &[0.44, 0.21, 0.84, 0.56, 0.05, -0.19, 0.76, 0.64], 2.559619744099403, 0.037572446331309045),
    (&[0.39, 0.67, 0.02, 0.46, 0.17, 0.12, 0.06, 0.77, 0.13, 0.25], &[0.08, 0.93, 0.21, 0.57, -0.22, -0.01, 0.23, 0.41, 0.09, 0.45], 0.3763089045031908, 0.7154051125761451),
    (&[0.36, 0.88, 0.96, 0.15, 0.18, 0.23, 0.23, 0.48, 0.59, 0.26, 0.0, 0.42], &[-0.22, 0.67, 0.85, -0.34, -0.5, -0.2, -0.2, 0.02, 0.47, -0.35, -0.15, -0.23], 6.723858189213635, 3.269797864178381e-05),
    (&[0.39, 0.4, 0.1, 0.63, 0.06, 0.07, 0.21, 0.16, 0.34, 0.05, 0.0, 0.15, 0.1, 0.36, 0.03], &[0.48, 0.1, 0.09, 0.65, -0.15, 0.13, 0.39, 0.33, 0.46, -0.06, -0.18, 0.06, 0.15, 0.37, -0.1], 0.5952679103502343, 0.5611639419169525),
    (&[0.16, 0.02, 0.95, 0.53, 0.15, 0.54, 0.03, 0.53, 0.98, 0.86, 0.7, 0.26, 0.37, 0.17, 0.77, 0.53, 0.78, 0.33, 0.22, 0.81], &[0.5, 0.38, 0.88, 0.63, -0.23, 0.5, -0.14, 0.31, 0.93, 0.88, 0.68, 0.2, 0.49, -0.04, 0.27, 0.06, 0.9, 0.8, 0.15, 0.69], 0.7445428766296973, 0.46565807998889835),
    (&[0.23, 0.2, 0.2, 0.62, 0.9, 0.84, 0.48, 0.65, 0.8, 0.08, 0.66, 0.91, 0.78, 0.75, 0.48, 0.18, 0.79, 0.33, 0.8, 0.97, 0.4, 0.4, 0.95, 0.72, 0.17], &[0.14, 0.08, 0.08, 0.72, 0.5, 0.87, 0.58, 0.74, 0.56, -0.27, 0.66, 0.73, 0.6, 0.83, 0.23, -0.48, 0.51, -0.24, 0.76, 0.83, 0.08, 0.2, 0.92, 0.54, 0.24], 3.8436885080306915, 0.0007813910726330482),
    (&[0.26, 0.42, 0.13, 0.91, 0.35, 0.46, 0.58, 0.9, 0.42, 0.92, 0.5, 0.53, 0.52, 0.02, 0.44, 0.18, 0.0, 0.8, 0.17, 0.47, 0.73, 0.56, 0.33, 0.52, 0.56, 0.78, 0.11, 0.56, 0.25, 0.28], &[0.28, 0.17, -0.19, 0.77, 0.52, 0.34, 0.39, 0.74, 0.1, 0.89, 0.25, 0.59, 0.04, 0.08, 0.3, -0.22, 0.13, 0.73, -0.29, 0.28, 0.78, 0.46, 0.48, 0.66, 0.68, 0.84, 0.37, 0.68, 0.33, -0.15], 2.3056812032614853, 0.028475311707969925),
    (&[0.15, 0.72, 0.66, 0.14, 0.88], &[-0.31, 0.09, 0.25, -0.52, -0.32], 4.786101416052079, 0.008736433745166708),
    (&[0.83, 0.16, 0.43, 0.52], &[0.63, -0.16, 0.29, 0.14], 4.74692883171144, 0.01773621224129422),
    (&[0.02, 0.55, 0.44], &[-1.69, -1.27, -1.54], 23.43090338149718, 0.00181650805881291),
    (&[0.62, 0.51, 0.06, 0.99, 0.79, 0.97, 0.1], &[0.53, 0.49, 0.01, 0.75, 0.85, 1.04, 0.33], 0.10280093240868544, 0.9214707455443414),
    (&[0.26, 0.15, 0.92, 0.57, 0.7, 0.09, 0.06, 0.69, 0.43], &[-0.06, 0.45, 1.01, 0.21, 0.31, 0.31, 0.14, 0.93, 0.47], 0.12221733739848546, 0.9057412671224747),
    (&[0.45, 0.34, 0.55, 0.93, 0.27, 0.13, 0.53, 0.24, 0.11, 0.16, 0.05, 0.2, 0.31, 0.31, 0.76, 0.29, 0.5, 0.18, 0.35, 0.02, 0.25, 0.02, 0.73, 0.55, 0.19, 0.47, 0.93, 0.11, 0.82, 0.43, 0.5, 0.83, 0.39, 0.51, 0.69, 0.98, 0.34, 0.83, 0.71, 0.64, 0.4, 0.35, 0.05, 0.13, 0.07, 0.74, 0.26, 0.16, 0.08, 0.84], &[0.6, 0.07, 0.47, 1.03, 0.16, 0.29, 0.6, 0.37, 0.02, 0.62, 0.25, 0.11, 0.28, 0.78, 0.64, 0.41, 0.65, 0.13, 0.07, 0.01, 0.27, 0.2, 0.84, 0.5, 0.31, 0.53, 0.92, 0.07, 0.72, 0.52, 0.24, 0.65, 0.34, 0.17, 0.55, 0.53, 0.15, 0.89, 0.77, 0.58, 0.3, 0.02, 0.37, 0.18, 0.24, 0.51, 0.17, -0.25, 0.19, 0.98], 0.47775223749467, 0.6349509768219559),
];

fn statistics() -> Check {
    let mut worst = 0.0f64;
    for (a, b, t, p) in T_CASES {
        let r = paired_t_test(a, b).map_err(err)?;
        ensure(r.flag == TestFlag::Regular, || "reference case flagged degenerate".into())?;
        worst = worst.max((r.p_value - p).abs());
        ensure((r.t_statistic - t).abs() <= 1e-9 * t.abs().max(1.0), || format!("t {} vs {t}", r.t_statistic))?;
    }
    ensure(worst <= 1e-6, || format!("p-value error {worst:e}"))?;
    let same = paired_t_test(&[0.2, 0.4, 0.6], &[0.2, 0.4, 0.6]).map_err(err)?;
    ensure(same.flag == TestFlag::AllZero && same.t_statistic == 0.0 && same.p_value == 1.0, || format!("{same:?}"))?;
    let shift = paired_t_test(&[0.5, 0.7, 0.9], &[0.4, 0.6, 0.8]).map_err(err)?;
    ensure(shift.flag == TestFlag::ZeroVariance && shift.t_statistic == f64::INFINITY && shift.p_value == 0.0, || format!("{shift:?}"))?;
    ensure(paired_t_test(&[1.0], &[0.0]).is_err() && paired_t_test(&[1.0, 2.0], &[0.0]).is_err(), || "bad input accepted".into())?;
    Ok(format!("20 reference p-values within {worst:.1e}; equal and constant-shift samples flagged"))
}

fn simulator() -> Check {
    let cfg = SimConfig::for_object(ObjectKind::Ball14);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for seed in 0..10_000 {
        let env = reset(&cfg.with_seed(seed), cfg.resting_position(0.3, 0.0)).map_err(err)?;
        let n = env.calibration_bias.iter().map(|v| v * v).sum::<f64>().sqrt();
        lo = lo.min(n);
        hi = hi.max(n);
    }
    ensure(lo >= 0.001 && hi <= 0.006, || format!("bias norm range [{lo}, {hi}]"))?;

    let (mut ok, mut total) = (0usize, 0usize);
    let mut per = Vec::new();
    for kind in ObjectKind::ALL {
        let cfg = SimConfig::for_object(kind);
        let demos = generate_demos(&cfg, 500, 1).map_err(err)?;
        let r = replay_all(&demos, &cfg, 2).map_err(err)?;
        ok += r.successes;
        total += r.episodes;
        per.push(format!("{kind} {:.3}", r.success_rate()));
    }
    let replay = ok as f64 / total as f64;
    ensure(replay >= 0.85, || format!("replay success {replay:.3} ({})", per.join(", ")))?;

    for kind in ObjectKind::ALL {
        let cfg = SimConfig::noiseless(kind);
        let r = evaluate_grid(&mut ExpertPolicy::new(&cfg), &cfg, 5, 1, RolloutOptions::default()).map_err(err)?;
        ensure(r.success_rate() == 1.0, || format!("noiseless expert {:.2} on {kind}", r.success_rate()))?;
    }
    Ok(format!(
        "bias norm in [{:.2}, {:.2}] mm, replay of 3x500 demos {replay:.3} ({}), noiseless expert 100% on every object",
        lo * 1e3,
        hi * 1e3,
        per.join(", ")
    ))
}

fn headline(report: &BenchmarkReport, elapsed: Duration) -> Check {
    let all = |m: Method| report.success_all(m).unwrap_or(f64::NAN);
    let p = |name: &str| report.comparison(name, "all").map_or(f64::NAN, |t| t.p_value);
    let (robot, objc, noise, ens) = (all(Method::BcRobot), all(Method::BcObject), all(Method::BcObjectNoise), all(Method::Ensemble));
    let mut fails = Vec::new();
    if !(objc >= robot) {
        fails.push(format!("(a) BC+ObjC {objc:.3} < BC+RobotC {robot:.3}"));
    }
    if !(noise > objc && p("noise_vs_objc") < 0.05) {
        fails.push(format!("(b) noise {noise:.3} vs objc {objc:.3}, p {:.3}", p("noise_vs_objc")));
    }
    if !(ens >= noise && ens > robot && p("ensemble_vs_robotc") < 0.05) {
        fails.push(format!("(c) ensemble {ens:.3}, noise {noise:.3}, robot {robot:.3}, p {:.3}", p("ensemble_vs_robotc")));
    }
    for m in Method::ALL.into_iter().filter(|m| m.is_learned()) {
        let rates: Vec<(ObjectKind, f64)> = ObjectKind::ALL.iter().map(|&o| (o, report.success(m, o).unwrap_or(f64::NAN))).collect();
        let b14 = rates.iter().find(|r| r.0 == ObjectKind::Ball14).map_or(f64::NAN, |r| r.1);
        if rates.iter().any(|&(o, r)| o != ObjectKind::Ball14 && !(r > b14)) {
            fails.push(format!("(d) {}: {rates:?}", m.label()));
        }
    }
    if elapsed > Duration::from_secs(15 * 60) {
        fails.push(format!("runtime {:.0}s", elapsed.as_secs_f64()));
    }
    let detail = format!(
        "All: RobotC {:.1}, ObjC {:.1}, Noise {:.1} (p {:.3}), Ensemble {:.1} (p vs RobotC {:.4}); {:.0}s",
        robot * 100.0,
        objc * 100.0,
        noise * 100.0,
        p("noise_vs_objc"),
        ens * 100.0,
        p("ensemble_vs_robotc"),
        elapsed.as_secs_f64()
    );
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", fails.join("; ")))
    }
}

fn shift(report: &BenchmarkReport) -> Check {
    let d = |m: Method| report.shift(m).unwrap_or(f64::NAN);
    let (knn, objc, noise, ens) = (d(Method::KnnObject), d(Method::BcObject), d(Method::BcObjectNoise), d(Method::Ensemble));
    let detail = format!("mean nearest-demo distance: kNN+ObjC {knn:.3}, BC+ObjC {objc:.3}, Noise {noise:.3}, Ensemble {ens:.3}");
    if knn < objc && noise < objc && ens <= noise {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut failed = 0;
    let mut report_line = |n: usize, name: &str, start: Instant, limit: Option<Duration>, r: Check| {
        let dt = start.elapsed();
        let r = match (r, limit) {
            (Ok(m), Some(l)) if dt > l => Err(format!("{m} -- took {:.1}s, limit {:.0}s", dt.as_secs_f64(), l.as_secs_f64())),
            (r, _) => r,
        };
        match r {
            Ok(m) => println!("PASS criterion {n} ({name}): {m} [{:.1}s]", dt.as_secs_f64()),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {m} [{:.1}s]", dt.as_secs_f64());
            }
        }
    };
    let t = Instant::now();
    report_line(1, "geometry", t, Some(Duration::from_secs(5)), geometry());
    let t = Instant::now();
    report_line(2, "noise injection", t, Some(Duration::from_secs(10)), noise());
    let t = Instant::now();
    report_line(3, "BC training", t, None, bc_training());
    let t = Instant::now();
    report_line(4, "k-NN", t, None, knn());
    let t = Instant::now();
    report_line(5, "ensemble", t, None, ensemble());
    let t = Instant::now();
    report_line(6, "statistics", t, None, statistics());
    let t = Instant::now();
    report_line(7, "simulator calibration", t, None, simulator());

    if std::env::var_os("FINEMANIP_SKIP_BENCH").is_some() {
        println!("SKIP criterion 8 (headline results): FINEMANIP_SKIP_BENCH is set");
        println!("SKIP criterion 9 (covariate shift): FINEMANIP_SKIP_BENCH is set");
    } else {
        let t = Instant::now();
        match run_benchmark(&BenchConfig::default(), |_| {}) {
            Ok(report) => {
                let elapsed = t.elapsed();
                println!("{}", report.table_csv().trim_end());
                report_line(8, "headline results", t, None, headline(&report, elapsed));
                let t = Instant::now();
                report_line(9, "covariate shift", t, None, shift(&report));
            }
            Err(e) => {
                report_line(8, "headline results", t, None, Err(e.to_string()));
                report_line(9, "covariate shift", t, None, Err("benchmark did not run".into()));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

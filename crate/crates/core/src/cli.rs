//! Batch command-line front end. Every command writes a [`RunManifest`]
//! next to its outputs; exit codes are 1 usage, 2 validation, 3 runtime.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{flatten_states, pca_fit, shift_metric};
use crate::bc::{train, BcNetwork};
use crate::bench::run_benchmark;
use crate::config::RunConfig;
use crate::data::{load_demos, load_trajectories, save_demos, save_trajectories, NoiseConfig, Trajectory};
use crate::ensemble::{calibrate_alpha, EnsembleConfig, EnsemblePolicy};
use crate::error::{Error, Result};
use crate::geometry::FrameTag;
use crate::knn::{KnnIndex, KnnPolicy};
use crate::policy::{in_world_frame, Policy, WorldFrame};
use crate::sim::{evaluate_grid, generate_demos, replay_all, ObjectKind, RolloutOptions};

#[derive(Debug, Parser)]
#[command(name = "finemanip", version, about = "Imitation learning for fine manipulation on a kinematic grasping simulator")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    Gen(GenArgs),
    /// Fit a BC network or build a k-NN index from a demonstration file.
    Train(TrainArgs),
    /// Roll a policy (BC, k-NN, or both as an ensemble) over the placement grid.
    Eval(EvalArgs),
    /// Re-execute demonstrations open loop.
    Replay(ReplayArgs),
    /// Covariate shift of recorded rollouts relative to the demonstrations.
    Analyze(AnalyzeArgs),
    /// The full method x object x seed benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub object: ObjectKind,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Bc,
    Knn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: TrainMethod,
    #[arg(long, default_value = "object")]
    pub frame: FrameTag,
    /// Corrective-label noise magnitude (BC only); 0 disables it.
    #[arg(long, allow_negative_numbers = true)]
    pub noise_eta: Option<f64>,
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A BC model and/or a k-NN index; passing one of each runs the ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// `auto` calibrates on the index's demonstrations.
    #[arg(long, default_value = "auto")]
    pub ensemble_alpha: String,
    #[arg(long)]
    pub object: ObjectKind,
    #[arg(long, default_value_t = 5)]
    pub grid: usize,
    /// Total episodes, spread evenly over the grid cells.
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the visited states as a trajectory file.
    #[arg(long)]
    pub rollouts_out: Option<PathBuf>,
    /// Also write the ensemble's branch decisions (last episode) as CSV.
    #[arg(long)]
    pub switch_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long)]
    pub object: ObjectKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub rollouts: Vec<PathBuf>,
    /// Frame to compare in; defaults to the demonstrations' frame.
    #[arg(long)]
    pub frame: Option<FrameTag>,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub demo_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Artifact> {
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance record written next to every command's outputs. Timestamps
/// live only here, so the outputs themselves are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Effective settings (echoed configuration, calibrated values).
    pub parameters: serde_json::Value,
    pub tool_version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

/// Where the manifest for `out` goes: inside it for directories, beside it for files.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

struct Recorder {
    command: &'static str,
    args: Vec<String>,
    config_path: Option<PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl Recorder {
    fn finish(
        self,
        manifest_at: &Path,
        seeds: Vec<u64>,
        inputs: &[&Path],
        outputs: &[PathBuf],
        parameters: serde_json::Value,
    ) -> Result<()> {
        let mut input_list: Vec<Artifact> = inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?;
        if let Some(c) = &self.config_path {
            input_list.push(Artifact::of(c)?);
        }
        let manifest = RunManifest {
            command: self.command.into(),
            args: self.args,
            config_path: self.config_path,
            seeds,
            inputs: input_list,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            parameters,
            tool_version: version_string().into(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(manifest_at, text).map_err(|e| Error::io(manifest_at, e))
    }
}

/// Tool version plus the on-disk format versions.
pub fn version_string() -> &'static str {
    static VERSION: LazyLock<String> = LazyLock::new(|| {
        format!(
            "{} (demos v{}, bc model v{}, knn index v{})",
            env!("CARGO_PKG_VERSION"),
            crate::data::FORMAT_VERSION,
            crate::bc::MODEL_VERSION,
            crate::knn::INDEX_VERSION
        )
    });
    VERSION.as_str()
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let parsed = Cli::command()
        .version(version_string())
        .try_get_matches_from(&args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let command = match &cli.command {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Replay(_) => "replay",
        Command::Analyze(_) => "analyze",
        Command::Bench(_) => "bench",
    };
    let rec = Recorder {
        command,
        args,
        config_path: cli.config.clone(),
        started: Instant::now(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(&cfg, a, rec),
        Command::Train(a) => cmd_train(&cfg, a, rec),
        Command::Eval(a) => cmd_eval(&cfg, a, rec),
        Command::Replay(a) => cmd_replay(&cfg, a, rec),
        Command::Analyze(a) => cmd_analyze(a, rec),
        Command::Bench(a) => cmd_bench(&cfg, a, rec),
    }
}

fn cmd_gen(cfg: &RunConfig, a: GenArgs, rec: Recorder) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let sim = cfg.sim_for(a.object)?;
    let demos = generate_demos(&sim, a.n, a.seed)?;
    save_demos(&demos, &a.out)?;
    println!("wrote {} demonstrations ({} steps) to {}", demos.len(), demos.total_steps(), a.out.display());
    rec.finish(
        &manifest_path(&a.out, false),
        vec![a.seed],
        &[],
        std::slice::from_ref(&a.out),
        json!({ "n": a.n, "object": a.object, "sim": sim }),
    )
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs, rec: Recorder) -> Result<()> {
    if let Some(eta) = a.noise_eta {
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::Usage(format!("--noise-eta must be >= 0, got {eta}")));
        }
        if a.method == TrainMethod::Knn && eta > 0.0 {
            return Err(Error::Usage("--noise-eta applies to BC only".into()));
        }
    }
    let raw = load_demos(&a.demos)?;
    if raw.frame() == FrameTag::ObjectCentric && a.frame == FrameTag::RobotCentric {
        return Err(Error::Validation(format!(
            "{} holds object-centric demonstrations; cannot train a robot-centric model",
            a.demos.display()
        )));
    }
    let demos = raw.in_frame(a.frame)?;
    let params = match a.method {
        TrainMethod::Bc => {
            let mut tc = cfg.train.clone();
            tc.seed = a.seed;
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(lr) = a.lr {
                tc.learning_rate = lr;
            }
            if let Some(eta) = a.noise_eta {
                tc.noise = (eta > 0.0).then(|| NoiseConfig::new(eta, a.seed));
            }
            let outcome = train(&demos, &tc)?;
            outcome.network.save(&a.out)?;
            println!(
                "trained BC ({}) for {} epochs, final loss {:.6}",
                a.frame,
                tc.epochs,
                outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            json!({ "method": "bc", "frame": a.frame, "train": tc, "final_loss": outcome.loss_trace.last() })
        }
        TrainMethod::Knn => {
            let mut kc = cfg.knn;
            if let Some(k) = a.k {
                kc.k = k;
            }
            let index = KnnIndex::from_demos(&demos, &kc)?;
            let demo_ref = std::fs::canonicalize(&a.demos).map_err(|e| Error::io(&a.demos, e))?;
            index.save(&a.out, &demo_ref, kc.dedup_distance)?;
            println!("built k-NN index ({}) over {} features", a.frame, index.len());
            json!({ "method": "knn", "frame": a.frame, "knn": kc, "features": index.len() })
        }
    };
    rec.finish(&manifest_path(&a.out, false), vec![a.seed], &[&a.demos], std::slice::from_ref(&a.out), params)
}

enum Loaded {
    Bc(BcNetwork),
    Knn(Box<(KnnIndex, crate::data::DemoSet)>),
}

fn load_model(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    match v.get("format").and_then(|f| f.as_str()) {
        Some(crate::bc::MODEL_FORMAT) => Ok(Loaded::Bc(BcNetwork::load(path)?)),
        Some(crate::knn::INDEX_FORMAT) => {
            let (index, demos, _) = KnnIndex::load_with_demos(path)?;
            Ok(Loaded::Knn(Box::new((index, demos))))
        }
        other => Err(Error::Validation(format!("{}: unrecognised model format {other:?}", path.display()))),
    }
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs, rec: Recorder) -> Result<()> {
    if a.grid == 0 || a.trials == 0 || a.trials % (a.grid * a.grid) != 0 {
        return Err(Error::Usage(format!(
            "--trials ({}) must be a positive multiple of grid cells ({})",
            a.trials,
            a.grid * a.grid
        )));
    }
    let mut bc = None;
    let mut knn = None;
    for p in &a.models {
        match load_model(p)? {
            Loaded::Bc(n) if bc.is_none() => bc = Some(n),
            Loaded::Knn(k) if knn.is_none() => knn = Some(*k),
            _ => return Err(Error::Usage("pass at most one BC model and one k-NN index".into())),
        }
    }
    let mut params = json!({ "object": a.object, "grid": a.grid, "trials": a.trials });
    let sim = cfg.sim_for(a.object)?.with_seed(a.seed);
    let per_cell = a.trials / (a.grid * a.grid);
    let opts = RolloutOptions { record: a.rollouts_out.is_some() };
    let run = |p: &mut dyn Policy| evaluate_grid(p, &sim, a.grid, per_cell, opts);
    let (report, switch_csv) = match (bc, knn) {
        (Some(net), None) => (run(in_world_frame(net)?.as_mut())?, None),
        (None, Some((index, _))) => (run(in_world_frame(KnnPolicy::new(index))?.as_mut())?, None),
        (Some(net), Some((index, demos))) => {
            let alpha = if a.ensemble_alpha == "auto" {
                calibrate_alpha(&index, &demos, cfg.ensemble.quantile)?
            } else {
                a.ensemble_alpha
                    .parse()
                    .map_err(|_| Error::Usage(format!("--ensemble-alpha must be `auto` or a number, got {}", a.ensemble_alpha)))?
            };
            params["alpha"] = json!(alpha);
            params["alpha_quantile"] = json!(cfg.ensemble.quantile);
            let pol = EnsemblePolicy::new(net, index, EnsembleConfig { alpha })?;
            let (r, pol) = if pol.frame() == FrameTag::ObjectCentric {
                let mut wrapped = WorldFrame::new(pol)?;
                (run(&mut wrapped)?, wrapped.into_inner())
            } else {
                let mut pol = pol;
                (run(&mut pol)?, pol)
            };
            params["knn_fire_fraction"] = json!(pol.knn_episode_fraction());
            (r, Some(pol.switch_log_csv()))
        }
        (None, None) => return Err(Error::Usage("no model given".into())),
    };
    write_file(&a.out, &report.to_csv())?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.rollouts_out {
        save_trajectories(p, FrameTag::RobotCentric, &report.rollouts)?;
        outputs.push(p.clone());
    }
    if let (Some(p), Some(csv)) = (&a.switch_log, switch_csv) {
        write_file(p, &csv)?;
        outputs.push(p.clone());
    }
    println!("{} on {}: success {:.3} over {} episodes", report.agent, a.object, report.success_rate(), report.episodes.len());
    params["success_rate"] = json!(report.success_rate());
    let inputs: Vec<&Path> = a.models.iter().map(PathBuf::as_path).collect();
    rec.finish(&manifest_path(&a.out, false), vec![a.seed], &inputs, &outputs, params)
}

fn cmd_replay(cfg: &RunConfig, a: ReplayArgs, rec: Recorder) -> Result<()> {
    let demos = load_demos(&a.demos)?;
    let sim = cfg.sim_for(a.object)?;
    let summary = replay_all(&demos, &sim, a.seed)?;
    let csv = format!(
        "object,episodes,successes,success_rate\n{},{},{},{:.6}\n",
        a.object,
        summary.episodes,
        summary.successes,
        summary.success_rate()
    );
    write_file(&a.out, &csv)?;
    println!("replay on {}: {}/{} succeeded", a.object, summary.successes, summary.episodes);
    rec.finish(
        &manifest_path(&a.out, false),
        vec![a.seed],
        &[&a.demos],
        std::slice::from_ref(&a.out),
        json!({ "object": a.object, "success_rate": summary.success_rate() }),
    )
}

fn in_frame(trajs: Vec<Trajectory>, from: FrameTag, to: FrameTag, path: &Path) -> Result<Vec<Trajectory>> {
    match (from, to) {
        (f, t) if f == t => Ok(trajs),
        (FrameTag::RobotCentric, FrameTag::ObjectCentric) => trajs.iter().map(Trajectory::to_object_frame).collect(),
        _ => Err(Error::Validation(format!("{} is object-centric; cannot compare in the robot frame", path.display()))),
    }
}

fn cmd_analyze(a: AnalyzeArgs, rec: Recorder) -> Result<()> {
    let raw = load_demos(&a.demos)?;
    let frame = a.frame.unwrap_or(raw.frame());
    if raw.frame() == FrameTag::ObjectCentric && frame == FrameTag::RobotCentric {
        return Err(Error::Validation("object-centric demonstrations cannot be compared in the robot frame".into()));
    }
    let demos = raw.in_frame(frame)?;
    let pca = pca_fit(&flatten_states(demos.trajectories()), a.dims)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut cloud = String::from("x,y,source,agent\n");
    let mut summaries = Vec::new();
    for (i, path) in a.rollouts.iter().enumerate() {
        let (from, trajs) = load_trajectories(path)?;
        let trajs: Vec<Trajectory> = trajs.into_iter().filter(|t| !t.is_empty()).collect();
        let trajs = in_frame(trajs, from, frame, path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let report = shift_metric(&name, &demos, &trajs, &pca)?;
        let csv = report.point_cloud_csv(false);
        // demo points once, rollout points for every agent
        cloud.extend(csv.lines().filter(|l| i == 0 || !l.contains(",demo,")).map(|l| format!("{l}\n")));
        println!(
            "{name}: mean_nn_distance {:.4}, p95 {:.4} over {} states",
            report.mean_nn_distance,
            report.p95_nn_distance,
            report.projected_points.len()
        );
        summaries.push(json!({
            "agent": name,
            "mean_nn_distance": report.mean_nn_distance,
            "p95_nn_distance": report.p95_nn_distance,
            "states": report.projected_points.len(),
        }));
    }
    let shift_path = a.out.join("shift.json");
    let cloud_path = a.out.join("pointcloud.csv");
    let body = json!({ "frame": frame, "pca": pca, "agents": summaries });
    write_file(&shift_path, &(serde_json::to_string_pretty(&body)? + "\n"))?;
    write_file(&cloud_path, &cloud)?;
    let mut inputs: Vec<&Path> = vec![&a.demos];
    inputs.extend(a.rollouts.iter().map(PathBuf::as_path));
    rec.finish(&manifest_path(&a.out, true), vec![], &inputs, &[shift_path, cloud_path], json!({ "frame": frame, "dims": a.dims }))
}

fn cmd_bench(cfg: &RunConfig, a: BenchArgs, rec: Recorder) -> Result<()> {
    let mut bench = cfg.bench.clone();
    if let Some(s) = a.seeds {
        bench.seeds = s;
    }
    if a.demo_dir.is_some() {
        bench.demo_dir = a.demo_dir.clone();
    }
    let start = Instant::now();
    let report = run_benchmark(&bench, |line| eprintln!("[{:>7.1}s] {line}", start.elapsed().as_secs_f64()))?;
    print!("{}", report.summary());
    let outputs = report.write(&a.out)?;
    let mut inputs = Vec::new();
    if let Some(dir) = &bench.demo_dir {
        for &o in &bench.objects {
            for s in bench.seed_list() {
                inputs.push(crate::bench::demo_path(dir, o, s));
            }
        }
    }
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    rec.finish(&manifest_path(&a.out, true), report.seeds.clone(), &inputs, &outputs, json!({ "bench": bench }))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_locations() {
        assert_eq!(manifest_path(Path::new("out/demos.jsonl"), false), PathBuf::from("out/demos.jsonl.manifest.json"));
        assert_eq!(manifest_path(Path::new("bench"), true), PathBuf::from("bench/manifest.json"));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["finemanip", "gen", "--object", "cube"]), 1);
        assert_eq!(run(["finemanip", "gen", "--n", "0", "--object", "cube", "--out", "/tmp/x"]), 1);
        assert_eq!(run(["finemanip", "frobnicate"]), 1);
        assert_eq!(run(["finemanip", "--version"]), 0);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

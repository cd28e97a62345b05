//! The full method x object x seed comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{flatten_states, paired_t_test, pca_fit, shift_metric, PairedTestResult, ShiftReport};
use crate::bc::{train, BcNetwork, TrainConfig};
use crate::data::{load_demos, DemoSet, NoiseConfig, Trajectory};
use crate::ensemble::{calibrate_alpha, EnsembleConfig, EnsemblePolicy, DEFAULT_QUANTILE};
use crate::error::{Error, Result};
use crate::geometry::FrameTag;
use crate::knn::{KnnConfig, KnnIndex, KnnPolicy};
use crate::policy::{in_world_frame, Policy, WorldFrame};
use crate::sim::{evaluate_grid, generate_demos, replay_all, EvalReport, ExpertPolicy, ObjectKind, RolloutOptions, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Expert,
    Replay,
    #[serde(rename = "BC+RobotC")]
    BcRobot,
    #[serde(rename = "BC+ObjC")]
    BcObject,
    #[serde(rename = "BC+ObjC+Noise")]
    BcObjectNoise,
    #[serde(rename = "kNN+RobotC")]
    KnnRobot,
    #[serde(rename = "kNN+ObjC")]
    KnnObject,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Expert,
        Method::Replay,
        Method::BcRobot,
        Method::BcObject,
        Method::BcObjectNoise,
        Method::KnnRobot,
        Method::KnnObject,
        Method::Ensemble,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Expert => "Expert",
            Method::Replay => "Replay",
            Method::BcRobot => "BC+RobotC",
            Method::BcObject => "BC+ObjC",
            Method::BcObjectNoise => "BC+ObjC+Noise",
            Method::KnnRobot => "kNN+RobotC",
            Method::KnnObject => "kNN+ObjC",
            Method::Ensemble => "Ensemble",
        }
    }

    /// Trained agents (everything except the expert and open-loop replay).
    pub fn is_learned(&self) -> bool {
        !matches!(self, Method::Expert | Method::Replay)
    }

    pub fn frame(&self) -> FrameTag {
        match self {
            Method::BcRobot | Method::KnnRobot | Method::Expert | Method::Replay => FrameTag::RobotCentric,
            _ => FrameTag::ObjectCentric,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub objects: Vec<ObjectKind>,
    pub methods: Vec<Method>,
    /// Seeds `first_seed .. first_seed + seeds` drive demos, training and evaluation.
    pub first_seed: u64,
    pub seeds: usize,
    pub demos: usize,
    /// Load demonstrations from `<demo_dir>/<object>-seed<seed>.demos` instead of generating them.
    pub demo_dir: Option<PathBuf>,
    pub grid: usize,
    pub trials: usize,
    pub noise_eta: f64,
    pub alpha_quantile: f64,
    pub pca_dims: usize,
    /// Measure covariate shift of the learned agents.
    pub shift: bool,
    pub train: TrainConfig,
    pub knn: KnnConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            objects: ObjectKind::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            first_seed: 1,
            seeds: 5,
            demos: 100,
            demo_dir: None,
            grid: 5,
            trials: 1,
            noise_eta: 0.001,
            alpha_quantile: DEFAULT_QUANTILE,
            pca_dims: 2,
            shift: true,
            train: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            knn: KnnConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidArgument("benchmark needs at least one object and one method".into()));
        }
        if self.seeds < 2 {
            return Err(Error::InvalidArgument("paired comparisons need at least 2 seeds".into()));
        }
        if self.demos == 0 || self.grid == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument("demos, grid and trials must be positive".into()));
        }
        if !self.noise_eta.is_finite() || self.noise_eta < 0.0 {
            return Err(Error::InvalidArgument(format!("noise_eta must be >= 0, got {}", self.noise_eta)));
        }
        if !(0.0..=1.0).contains(&self.alpha_quantile) {
            return Err(Error::InvalidArgument(format!("alpha_quantile outside [0, 1]: {}", self.alpha_quantile)));
        }
        self.train.validate()?;
        if let Some(dir) = &self.demo_dir {
            for (object, seed) in self.cells() {
                let p = demo_path(dir, object, seed);
                if !p.is_file() {
                    return Err(Error::Validation(format!("missing demonstration file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }

    fn cells(&self) -> impl Iterator<Item = (ObjectKind, u64)> + '_ {
        self.objects.iter().flat_map(move |&o| self.seed_list().into_iter().map(move |s| (o, s)))
    }
}

pub fn demo_path(dir: &Path, object: ObjectKind, seed: u64) -> PathBuf {
    dir.join(format!("{object}-seed{seed}.demos"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub mean_nn_distance: f64,
    pub p95_nn_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub object: ObjectKind,
    pub seed: u64,
    pub success_rate: Option<f64>,
    pub shift: Option<ShiftSummary>,
    /// Ensemble only: calibrated gate and the share of episodes where k-NN acted.
    pub alpha: Option<f64>,
    pub knn_fire_fraction: Option<f64>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub a: Method,
    pub b: Method,
    /// An object name, or `all` for the per-seed object average.
    pub scope: String,
    pub test: Option<PairedTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub comparisons: Vec<Comparison>,
    /// Shift reports of the first seed, per object, for the point-cloud export.
    #[serde(skip)]
    pub clouds: BTreeMap<ObjectKind, Vec<ShiftReport>>,
}

/// Paired comparisons reported with every benchmark.
pub const COMPARISONS: [(&str, Method, Method); 4] = [
    ("objc_vs_robotc", Method::BcObject, Method::BcRobot),
    ("noise_vs_objc", Method::BcObjectNoise, Method::BcObject),
    ("ensemble_vs_noise", Method::Ensemble, Method::BcObjectNoise),
    ("ensemble_vs_robotc", Method::Ensemble, Method::BcRobot),
];

impl BenchmarkReport {
    pub fn cell(&self, method: Method, object: ObjectKind, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.object == object && c.seed == seed)
    }

    /// Per-seed success rates of one method on one object; `None` if any cell failed.
    pub fn seed_rates(&self, method: Method, object: ObjectKind) -> Option<Vec<f64>> {
        self.seeds.iter().map(|&s| self.cell(method, object, s)?.success_rate).collect()
    }

    /// Per-seed success averaged over the benchmark's objects.
    pub fn seed_rates_all(&self, method: Method) -> Option<Vec<f64>> {
        let per: Vec<Vec<f64>> = self.config.objects.iter().map(|&o| self.seed_rates(method, o)).collect::<Option<_>>()?;
        Some(
            (0..self.seeds.len())
                .map(|i| per.iter().map(|r| r[i]).sum::<f64>() / per.len() as f64)
                .collect(),
        )
    }

    pub fn success(&self, method: Method, object: ObjectKind) -> Option<f64> {
        self.seed_rates(method, object).map(|r| mean(&r))
    }

    pub fn success_all(&self, method: Method) -> Option<f64> {
        self.seed_rates_all(method).map(|r| mean(&r))
    }

    /// Seed-averaged mean nearest-demo distance over every object.
    pub fn shift(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .map(|c| c.shift.map(|s| s.mean_nn_distance))
            .collect::<Option<_>>()?;
        (!v.is_empty()).then(|| mean(&v))
    }

    pub fn comparison(&self, name: &str, scope: &str) -> Option<&PairedTestResult> {
        self.comparisons.iter().find(|c| c.name == name && c.scope == scope)?.test.as_ref()
    }

    /// Mean ensemble k-NN fire fraction over its cells.
    pub fn knn_fire_fraction(&self) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter_map(|c| c.knn_fire_fraction).collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    /// `method,<objects...>,all` rows of percentage success; failed cells are empty.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("method");
        for o in &self.config.objects {
            let _ = write!(out, ",{o}");
        }
        out.push_str(",all\n");
        let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_default();
        for &m in &self.config.methods {
            out.push_str(m.label());
            for &o in &self.config.objects {
                let _ = write!(out, ",{}", pct(self.success(m, o)));
            }
            let _ = writeln!(out, ",{}", pct(self.success_all(m)));
        }
        out
    }

    /// Human-readable summary: table, shift metrics and paired tests.
    pub fn summary(&self) -> String {
        let mut out = self.table_csv();
        out.push('\n');
        for &m in &self.config.methods {
            if let Some(s) = self.shift(m) {
                let _ = writeln!(out, "shift {:<14} mean_nn_distance {s:.4}", m.label());
            }
        }
        for c in &self.comparisons {
            if let Some(t) = &c.test {
                let _ = writeln!(
                    out,
                    "{:<20} {:<7} diff {:+.3} t {:+.3} p {:.4}",
                    c.name, c.scope, t.mean_diff, t.t_statistic, t.p_value
                );
            }
        }
        if let Some(f) = self.knn_fire_fraction() {
            let _ = writeln!(out, "ensemble k-NN fired in {:.1}% of episodes", 100.0 * f);
        }
        for c in self.cells.iter().filter(|c| c.diagnostic.is_some()) {
            let _ = writeln!(out, "FAILED {} {} seed {}: {}", c.method, c.object, c.seed, c.diagnostic.as_deref().unwrap_or(""));
        }
        out
    }

    /// Write `table.csv`, `report.json` and one `pointcloud-<object>.csv` per object.
    /// Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![(dir.join("table.csv"), self.table_csv())];
        files.push((dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n"));
        for (object, reports) in &self.clouds {
            let mut csv = String::from("x,y,source,agent\n");
            for r in reports {
                csv.push_str(&r.point_cloud_csv(false));
            }
            files.push((dir.join(format!("pointcloud-{object}.csv")), csv));
        }
        for (path, body) in &files {
            std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seed used for the evaluation grid of benchmark seed `seed`; shared by all
/// methods so their episodes are paired.
fn eval_seed(seed: u64) -> u64 {
    10_000 + seed
}

/// Run every configured method on every object and seed. Failures inside a
/// cell are recorded in its diagnostic; the rest of the benchmark continues.
pub fn run_benchmark(cfg: &BenchConfig, mut progress: impl FnMut(&str)) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let mut cells = Vec::new();
    let mut clouds = BTreeMap::new();
    for &object in &cfg.objects {
        for &seed in &seeds {
            let sim = SimConfig::for_object(object);
            let (mut results, reports) = run_cell_group(cfg, &sim, seed, &mut progress);
            if seed == seeds[0] && !reports.is_empty() {
                clouds.insert(object, reports);
            }
            cells.append(&mut results);
        }
    }
    let mut report = BenchmarkReport {
        config: cfg.clone(),
        seeds,
        cells,
        comparisons: Vec::new(),
        clouds,
    };
    for (name, a, b) in COMPARISONS {
        if !(cfg.methods.contains(&a) && cfg.methods.contains(&b)) {
            continue;
        }
        let mut scopes: Vec<(String, Option<(Vec<f64>, Vec<f64>)>)> = cfg
            .objects
            .iter()
            .map(|&o| (o.to_string(), report.seed_rates(a, o).zip(report.seed_rates(b, o))))
            .collect();
        scopes.push(("all".into(), report.seed_rates_all(a).zip(report.seed_rates_all(b))));
        for (scope, rates) in scopes {
            let test = rates.and_then(|(x, y)| paired_t_test(&x, &y).ok());
            report.comparisons.push(Comparison {
                name: name.into(),
                a,
                b,
                scope,
                test,
            });
        }
    }
    Ok(report)
}

struct Trained {
    robot: Result<DemoSet>,
    object: Result<DemoSet>,
}

fn load_or_generate(cfg: &BenchConfig, sim: &SimConfig, seed: u64) -> Result<DemoSet> {
    match &cfg.demo_dir {
        Some(dir) => {
            let set = load_demos(&demo_path(dir, sim.object, seed))?;
            if set.frame() != FrameTag::RobotCentric {
                return Err(Error::Validation("benchmark demonstration files must be robot-centric".into()));
            }
            Ok(set)
        }
        None => generate_demos(sim, cfg.demos, seed),
    }
}

fn share<T: Clone>(r: &Result<T>) -> Result<T> {
    r.as_ref().map(Clone::clone).map_err(|e| Error::InvalidState(e.to_string()))
}

fn run_cell_group(cfg: &BenchConfig, sim: &SimConfig, seed: u64, progress: &mut impl FnMut(&str)) -> (Vec<CellResult>, Vec<ShiftReport>) {
    let demos = load_or_generate(cfg, sim, seed);
    let sets = Trained {
        object: demos.as_ref().map_err(|e| Error::InvalidState(e.to_string())).and_then(|d| d.to_object_frame()),
        robot: demos,
    };
    let eval_cfg = sim.with_seed(eval_seed(seed));
    let opts = RolloutOptions { record: cfg.shift };
    let train_cfg = |noise: Option<NoiseConfig>| TrainConfig {
        seed,
        noise,
        ..cfg.train.clone()
    };
    let mut noise_net: Option<Result<BcNetwork>> = None;
    let mut object_index: Option<Result<KnnIndex>> = None;
    let mut out = Vec::new();
    let mut reports = Vec::new();
    for &method in &cfg.methods {
        let mut cell = CellResult {
            method,
            object: sim.object,
            seed,
            success_rate: None,
            shift: None,
            alpha: None,
            knn_fire_fraction: None,
            diagnostic: None,
        };
        let set = match method.frame() {
            FrameTag::RobotCentric => &sets.robot,
            FrameTag::ObjectCentric => &sets.object,
        };
        let result: Result<Option<EvalReport>> = (|| {
            let set = share(set)?;
            let eval = |p: &mut dyn Policy| evaluate_grid(p, &eval_cfg, cfg.grid, cfg.trials, opts);
            match method {
                Method::Expert => {
                    let mut p = ExpertPolicy::new(sim);
                    let r = evaluate_grid(&mut p, &eval_cfg, cfg.grid, cfg.trials, RolloutOptions::default())?;
                    cell.success_rate = Some(r.success_rate());
                    Ok(None)
                }
                Method::Replay => {
                    cell.success_rate = Some(replay_all(&set, sim, eval_seed(seed))?.success_rate());
                    Ok(None)
                }
                Method::BcRobot | Method::BcObject => {
                    let net = train(&set, &train_cfg(None))?.network;
                    Ok(Some(eval(in_world_frame(net)?.as_mut())?))
                }
                Method::BcObjectNoise => {
                    let net = noise_net
                        .get_or_insert_with(|| {
                            let noise = NoiseConfig::new(cfg.noise_eta, seed);
                            train(&set, &train_cfg(Some(noise))).map(|o| o.network)
                        })
                        .as_ref()
                        .map_err(|e| Error::InvalidState(e.to_string()))?
                        .clone();
                    Ok(Some(eval(&mut WorldFrame::new(net)?)?))
                }
                Method::KnnRobot => {
                    let index = KnnIndex::from_demos(&set, &cfg.knn)?;
                    Ok(Some(eval(in_world_frame(KnnPolicy::new(index))?.as_mut())?))
                }
                Method::KnnObject => {
                    let index = share(object_index.get_or_insert_with(|| KnnIndex::from_demos(&set, &cfg.knn)))?;
                    Ok(Some(eval(&mut WorldFrame::new(KnnPolicy::new(index))?)?))
                }
                Method::Ensemble => {
                    let net = share(noise_net.get_or_insert_with(|| {
                        let noise = NoiseConfig::new(cfg.noise_eta, seed);
                        train(&set, &train_cfg(Some(noise))).map(|o| o.network)
                    }))?;
                    let index = share(object_index.get_or_insert_with(|| KnnIndex::from_demos(&set, &cfg.knn)))?;
                    let alpha = calibrate_alpha(&index, &set, cfg.alpha_quantile)?;
                    let mut p = WorldFrame::new(EnsemblePolicy::new(net, index, EnsembleConfig { alpha })?)?;
                    let r = eval(&mut p)?;
                    cell.alpha = Some(alpha);
                    cell.knn_fire_fraction = p.inner().knn_episode_fraction();
                    Ok(Some(r))
                }
            }
        })();
        match result {
            Ok(Some(r)) => {
                cell.success_rate = Some(r.success_rate());
                if cfg.shift {
                    match measure_shift(method, &share(set).expect("evaluated"), &r.rollouts, cfg.pca_dims) {
                        Ok(s) => {
                            cell.shift = Some(ShiftSummary {
                                mean_nn_distance: s.mean_nn_distance,
                                p95_nn_distance: s.p95_nn_distance,
                            });
                            reports.push(s);
                        }
                        Err(e) => cell.diagnostic = Some(format!("shift metric: {e}")),
                    }
                }
            }
            Ok(None) => {}
            Err(e) => cell.diagnostic = Some(e.to_string()),
        }
        let status = match (cell.success_rate, &cell.diagnostic) {
            (_, Some(d)) => format!("failed: {d}"),
            (Some(r), None) => format!("{r:.2}"),
            (None, None) => String::new(),
        };
        progress(&format!("{} seed {seed} {:<14} {status}", sim.object, method.label()));
        out.push(cell);
    }
    (out, reports)
}

fn measure_shift(method: Method, demos: &DemoSet, rollouts: &[Trajectory], dims: usize) -> Result<ShiftReport> {
    let rollouts: Vec<Trajectory> = match demos.frame() {
        FrameTag::RobotCentric => rollouts.to_vec(),
        FrameTag::ObjectCentric => rollouts.iter().filter(|t| !t.is_empty()).map(Trajectory::to_object_frame).collect::<Result<_>>()?,
    };
    let pca = pca_fit(&flatten_states(demos.trajectories()), dims)?;
    shift_metric(method.label(), demos, &rollouts, &pca)
}

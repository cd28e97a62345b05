//! Non-parametric policy: exact k-nearest-neighbor search over a history
//! feature (last three end-effector poses plus the object position) and
//! inverse-distance blending of the neighbors' stored actions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bc::LossWeights;
use crate::data::{load_demos, Action, DemoSet, State, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{dist3, geodesic_angle, FrameTag, Pose, Quat, Vec3};
use crate::policy::{Policy, PoseHistory};
use crate::sim::EnvState;

pub const FEATURE_DIM: usize = 27;
pub const BLEND_EPS: f64 = 1e-9;
pub const DEFAULT_K: usize = 5;
pub const RECENCY: [f64; 3] = [0.25, 0.5, 1.0];
pub const INDEX_FORMAT: &str = "finemanip-knn";
pub const INDEX_VERSION: u32 = 1;

/// Last three poses (oldest first) and the object position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnFeature {
    pub poses: [Pose; 3],
    pub object_position: Vec3,
}

impl KnnFeature {
    pub fn new(poses: [Pose; 3], object_position: Vec3) -> KnnFeature {
        KnnFeature {
            poses: poses.map(|p| Pose {
                orientation: p.orientation.canonical(),
                ..p
            }),
            object_position,
        }
    }

    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for (s, p) in self.poses.iter().enumerate() {
            out[s * 8..s * 8 + 8].copy_from_slice(&p.to_array());
        }
        out[24..].copy_from_slice(&self.object_position);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub u_pos: [f64; 3],
    pub u_rot: [f64; 3],
    pub u_open: [f64; 3],
    pub u_obj: f64,
}

impl DistanceWeights {
    /// Loss weights applied to every history slot, scaled by the recency
    /// multipliers; the object term shares the position weight.
    pub fn from_loss_weights(w: &LossWeights) -> DistanceWeights {
        DistanceWeights {
            u_pos: RECENCY.map(|r| r * w.w_pos),
            u_rot: RECENCY.map(|r| r * w.w_rot),
            u_open: RECENCY.map(|r| r * w.w_open),
            u_obj: w.w_pos,
        }
    }

    /// Default loss weights divided by the spread of each state component
    /// on `demos`, so position, rotation and opening contribute comparably.
    pub fn for_demos(demos: &DemoSet) -> Result<DistanceWeights> {
        let stats = demos.stats()?;
        let v = stats.variance;
        let floor = |x: f64| if x > 1e-12 { x } else { 1.0 };
        let base = LossWeights::default();
        // squared geodesic angle is about 4x the squared quaternion spread
        let scaled = LossWeights {
            w_pos: base.w_pos / floor((v[0] + v[1] + v[2]) / 3.0),
            w_rot: base.w_rot / floor(4.0 * (v[3] + v[4] + v[5] + v[6])),
            w_open: base.w_open / floor(v[7]),
        };
        Ok(DistanceWeights::from_loss_weights(&scaled))
    }

    pub fn validate(&self) -> Result<()> {
        let all: Vec<f64> = self
            .u_pos
            .iter()
            .chain(&self.u_rot)
            .chain(&self.u_open)
            .copied()
            .chain([self.u_obj])
            .collect();
        if all.iter().any(|u| !u.is_finite() || *u < 0.0) {
            return Err(Error::InvalidArgument(format!("distance weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|u| *u == 0.0) {
            return Err(Error::InvalidArgument("at least one distance weight must be positive".into()));
        }
        Ok(())
    }

    /// Coordinates whose squared Euclidean distance never exceeds
    /// [`distance`]: quaternions use `theta^2 >= 4 |q1 - q2|^2` (for the
    /// closer sign), everything else is scaled by the square root of its weight.
    fn embed(&self, f: &KnnFeature) -> [f64; FEATURE_DIM] {
        let x = f.to_array();
        let mut e = [0.0; FEATURE_DIM];
        for s in 0..3 {
            let (sp, sr, so) = (self.u_pos[s].sqrt(), 2.0 * self.u_rot[s].sqrt(), self.u_open[s].sqrt());
            for d in 0..3 {
                e[s * 8 + d] = sp * x[s * 8 + d];
            }
            for d in 3..7 {
                e[s * 8 + d] = sr * x[s * 8 + d];
            }
            e[s * 8 + 7] = so * x[s * 8 + 7];
        }
        let so = self.u_obj.sqrt();
        for d in 24..27 {
            e[d] = so * x[d];
        }
        e
    }
}

/// `sum_slots [u_pos |dp|^2 + u_rot theta^2 + u_open do^2] + u_obj |dobj|^2`.
pub fn distance(a: &KnnFeature, b: &KnnFeature, w: &DistanceWeights) -> f64 {
    let mut d = 0.0;
    for s in 0..3 {
        let (pa, pb) = (&a.poses[s], &b.poses[s]);
        let dp = dist3(pa.position, pb.position);
        let th = geodesic_angle(&pa.orientation, &pb.orientation);
        let dop = pa.opening - pb.opening;
        d += w.u_pos[s] * dp * dp + w.u_rot[s] * th * th + w.u_open[s] * dop * dop;
    }
    let dobj = dist3(a.object_position, b.object_position);
    d + w.u_obj * dobj * dobj
}

/// Features and labels of every step of `traj`, history padded at the start.
pub fn trajectory_features(traj: &Trajectory) -> Vec<(KnnFeature, Action)> {
    let mut history = PoseHistory::default();
    traj.steps
        .iter()
        .map(|s| {
            history.push(s.state.pose);
            (KnnFeature::new(history.window(), s.state.object_position), s.action)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    /// `None` derives the weights from the demonstrations.
    pub weights: Option<DistanceWeights>,
    /// Drop demo steps whose feature lies within this distance of the
    /// previously kept step of the same trajectory.
    pub dedup_distance: Option<f64>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: DEFAULT_K,
            weights: None,
            dedup_distance: None,
        }
    }
}

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        lo: [f64; FEATURE_DIM],
        hi: [f64; FEATURE_DIM],
        left: usize,
        right: usize,
    },
}

/// Exact k-NN index: a kd-tree over a lower-bounding embedding, with every
/// candidate confirmed against the true distance.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    features: Vec<KnnFeature>,
    labels: Vec<Action>,
    k: usize,
    weights: DistanceWeights,
    frame: FrameTag,
    embedded: Vec<[f64; FEATURE_DIM]>,
    /// Point ids in tree order; leaves own contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl KnnIndex {
    pub fn new(features: Vec<KnnFeature>, labels: Vec<Action>, k: usize, weights: DistanceWeights, frame: FrameTag) -> Result<KnnIndex> {
        weights.validate()?;
        if features.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} features but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if k == 0 || k > features.len() {
            return Err(Error::InvalidArgument(format!("k = {k} with {} stored features", features.len())));
        }
        if labels.iter().any(|a| a.frame != frame) {
            return Err(Error::Validation(format!("labels must all be {frame}")));
        }
        let embedded: Vec<_> = features.iter().map(|f| weights.embed(f)).collect();
        let mut index = KnnIndex {
            features,
            labels,
            k,
            weights,
            frame,
            embedded,
            order: Vec::new(),
            nodes: Vec::new(),
            root: 0,
        };
        index.order = (0..index.features.len()).collect();
        let n = index.order.len();
        index.root = index.build(0, n);
        Ok(index)
    }

    pub fn from_demos(demos: &DemoSet, cfg: &KnnConfig) -> Result<KnnIndex> {
        let weights = match cfg.weights {
            Some(w) => w,
            None => DistanceWeights::for_demos(demos)?,
        };
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for traj in demos.trajectories() {
            let mut last: Option<KnnFeature> = None;
            for (f, a) in trajectory_features(traj) {
                if let (Some(tol), Some(prev)) = (cfg.dedup_distance, &last) {
                    if distance(&f, prev, &weights) < tol {
                        continue;
                    }
                }
                last = Some(f);
                features.push(f);
                labels.push(a);
            }
        }
        KnnIndex::new(features, labels, cfg.k, weights, demos.frame())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &DistanceWeights {
        &self.weights
    }

    pub fn frame(&self) -> FrameTag {
        self.frame
    }

    pub fn feature(&self, id: usize) -> &KnnFeature {
        &self.features[id]
    }

    pub fn label(&self, id: usize) -> &Action {
        &self.labels[id]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mut lo = [f64::INFINITY; FEATURE_DIM];
        let mut hi = [f64::NEG_INFINITY; FEATURE_DIM];
        for &i in &self.order[start..end] {
            for d in 0..FEATURE_DIM {
                lo[d] = lo[d].min(self.embedded[i][d]);
                hi[d] = hi[d].max(self.embedded[i][d]);
            }
        }
        let axis = (0..FEATURE_DIM)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .expect("nonempty");
        if hi[axis] - lo[axis] == 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mid = start + (end - start) / 2;
        let embedded = &self.embedded;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| embedded[a][axis].total_cmp(&embedded[b][axis]));
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes.push(Node::Split { lo, hi, left, right });
        self.nodes.len() - 1
    }

    /// Lower bound on the distance from `q` to any point under `node`.
    fn bound(&self, q: &[f64; FEATURE_DIM], node: usize) -> f64 {
        let (lo, hi) = match &self.nodes[node] {
            Node::Split { lo, hi, .. } => (lo, hi),
            Node::Leaf { .. } => return 0.0,
        };
        let gap = |v: f64, d: usize| {
            if v < lo[d] {
                lo[d] - v
            } else if v > hi[d] {
                v - hi[d]
            } else {
                0.0
            }
        };
        let mut total = 0.0;
        for s in 0..3 {
            for d in [s * 8, s * 8 + 1, s * 8 + 2, s * 8 + 7] {
                total += gap(q[d], d).powi(2);
            }
            let (mut plus, mut minus) = (0.0, 0.0);
            for d in s * 8 + 3..s * 8 + 7 {
                plus += gap(q[d], d).powi(2);
                minus += gap(-q[d], d).powi(2);
            }
            total += plus.min(minus);
        }
        for d in 24..27 {
            total += gap(q[d], d).powi(2);
        }
        // guard against rounding in the embedding
        total * (1.0 - 1e-9)
    }

    fn search(&self, f: &KnnFeature, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let q = self.weights.embed(f);
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![(self.root, 0.0)];
        while let Some((node, bound)) = stack.pop() {
            if heap.len() == k && bound > heap.peek().expect("full").distance {
                continue;
            }
            match &self.nodes[node] {
                Node::Leaf { start, end } => {
                    for &id in &self.order[*start..*end] {
                        if Some(id) == exclude {
                            continue;
                        }
                        let cand = Neighbor {
                            id,
                            distance: distance(f, &self.features[id], &self.weights),
                        };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().expect("full") {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                Node::Split { left, right, .. } => {
                    let bl = self.bound(&q, *left);
                    let br = self.bound(&q, *right);
                    // push the farther child first so the nearer is explored first
                    if bl <= br {
                        stack.push((*right, br));
                        stack.push((*left, bl));
                    } else {
                        stack.push((*left, bl));
                        stack.push((*right, br));
                    }
                }
            }
        }
        heap.into_sorted_vec()
    }

    /// The `k` nearest stored features, ascending by distance then id.
    pub fn query(&self, f: &KnnFeature) -> Vec<Neighbor> {
        self.search(f, self.k, None)
    }

    pub fn query_k(&self, f: &KnnFeature, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!("k = {k} with {} stored features", self.len())));
        }
        Ok(self.search(f, k, None))
    }

    /// Like [`KnnIndex::query`] but ignoring stored point `id`.
    pub fn query_excluding(&self, f: &KnnFeature, id: usize) -> Result<Vec<Neighbor>> {
        if self.k + 1 > self.len() {
            return Err(Error::InsufficientData(format!(
                "leave-one-out with k = {} needs more than {} features",
                self.k,
                self.len()
            )));
        }
        Ok(self.search(f, self.k, Some(id)))
    }

    /// Exhaustive scan; the reference the tree search must reproduce.
    pub fn brute_force(&self, f: &KnnFeature, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = self
            .features
            .iter()
            .enumerate()
            .map(|(id, g)| Neighbor {
                id,
                distance: distance(f, g, &self.weights),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    /// Inverse-distance blend of the neighbors' labels.
    pub fn blend(&self, neighbors: &[Neighbor]) -> Action {
        // An exact hit is answered by the stored label(s) alone.
        let exact: Vec<Neighbor> = neighbors.iter().filter(|n| n.distance == 0.0).copied().collect();
        let neighbors = if exact.is_empty() { neighbors } else { &exact[..] };
        let weights: Vec<f64> = neighbors.iter().map(|n| 1.0 / (n.distance + BLEND_EPS)).collect();
        let total: f64 = weights.iter().sum();
        let anchor = self.labels[neighbors[0].id].target.orientation;
        let mut pos = [0.0; 3];
        let mut q = [0.0; 4];
        let mut open = 0.0;
        for (n, w) in neighbors.iter().zip(&weights) {
            let t = &self.labels[n.id].target;
            let v = w / total;
            for d in 0..3 {
                pos[d] += v * t.position[d];
            }
            let s = if t.orientation.dot(&anchor) < 0.0 { -1.0 } else { 1.0 };
            for d in 0..4 {
                q[d] += v * s * t.orientation.0[d];
            }
            open += v * t.opening;
        }
        // keep the convex-combination bound exact despite rounding
        for d in 0..3 {
            let (lo, hi) = bounds(neighbors.iter().map(|n| self.labels[n.id].target.position[d]));
            pos[d] = pos[d].clamp(lo, hi);
        }
        let (lo, hi) = bounds(neighbors.iter().map(|n| self.labels[n.id].target.opening));
        open = open.clamp(lo, hi);
        let orientation = Quat(q).normalized().unwrap_or(anchor);
        Action {
            target: Pose {
                position: pos,
                orientation,
                opening: open,
            },
            frame: self.frame,
        }
    }

    pub fn predict(&self, f: &KnnFeature) -> Action {
        self.blend(&self.query(f))
    }

    /// Persist as a reference to the demo file plus the index settings;
    /// features are rebuilt from the demos on load.
    pub fn save(&self, path: &Path, demo_path: &Path, dedup_distance: Option<f64>) -> Result<()> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            demos: demo_path.to_path_buf(),
            frame: self.frame,
            k: self.k,
            weights: self.weights,
            dedup_distance,
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<KnnIndex> {
        Ok(KnnIndex::load_with_demos(path)?.0)
    }

    /// Load an index together with the demonstrations (in the index frame)
    /// it was rebuilt from, and the resolved demo file path.
    pub fn load_with_demos(path: &Path) -> Result<(KnnIndex, DemoSet, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: IndexFile = serde_json::from_str(&text)?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(Error::Validation(format!("unsupported index file {} v{}", file.format, file.version)));
        }
        let demo_path = if file.demos.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(&file.demos)
        } else {
            file.demos.clone()
        };
        let demos = load_demos(&demo_path)?.in_frame(file.frame)?;
        let cfg = KnnConfig {
            k: file.k,
            weights: Some(file.weights),
            dedup_distance: file.dedup_distance,
        };
        Ok((KnnIndex::from_demos(&demos, &cfg)?, demos, demo_path))
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    demos: PathBuf,
    frame: FrameTag,
    k: usize,
    weights: DistanceWeights,
    dedup_distance: Option<f64>,
}

/// k-NN as a closed-loop policy; keeps its own pose history.
#[derive(Debug, Clone)]
pub struct KnnPolicy {
    index: KnnIndex,
    history: PoseHistory,
}

impl KnnPolicy {
    pub fn new(index: KnnIndex) -> KnnPolicy {
        KnnPolicy {
            index,
            history: PoseHistory::default(),
        }
    }

    pub fn index(&self) -> &KnnIndex {
        &self.index
    }
}

impl Policy for KnnPolicy {
    fn name(&self) -> &str {
        "kNN"
    }

    fn frame(&self) -> FrameTag {
        self.index.frame
    }

    fn reset(&mut self, _episode_seed: u64) {
        self.history.clear();
    }

    fn act(&mut self, obs: &State, _env: &EnvState) -> Result<Action> {
        if obs.frame != self.index.frame {
            return Err(Error::Validation(format!("index holds {} features, got {}", self.index.frame, obs.frame)));
        }
        self.history.push(obs.pose);
        Ok(self.index.predict(&KnnFeature::new(self.history.window(), obs.object_position)))
    }
}

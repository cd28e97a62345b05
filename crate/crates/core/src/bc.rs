//! Behavior cloning: a 64x32 ReLU network mapping the 11-D state to an 8-D
//! target pose, trained with a per-component pose loss and optional
//! noise-injected corrective labels.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{inject_noise_in_place, Action, DemoSet, NoiseConfig, State, StateStats, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{FrameTag, Pose, Quat};
use crate::policy::Policy;
use crate::sim::EnvState;

pub const HIDDEN: [usize; 2] = [64, 32];
pub const MODEL_FORMAT: &str = "finemanip-bc";
pub const MODEL_VERSION: u32 = 1;

/// Quaternion outputs shorter than this cannot be normalized.
pub const MIN_QUAT_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected network. Parameters are stored layer by layer, each
/// layer as a row-major `out x in` weight matrix followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub params: Vec<f64>,
}

/// Per-layer activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Input followed by each layer's post-activation output.
    pub activations: Vec<Vec<f64>>,
    /// Each layer's pre-activation.
    pub pre: Vec<Vec<f64>>,
}

/// Batched counterpart of [`Trace`]: one column per sample.
#[derive(Debug, Clone, Default)]
pub struct BatchTrace {
    pub activations: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: &[usize], hidden_activation: Activation) -> Mlp {
        Mlp {
            sizes: sizes.to_vec(),
            hidden_activation,
            params: vec![0.0; Self::param_count_for(sizes)],
        }
    }

    /// He-normal weights; the last layer is scaled down so initial outputs
    /// sit near the output mean.
    pub fn init(sizes: &[usize], hidden_activation: Activation, rng: &mut impl Rng) -> Mlp {
        let mut net = Mlp::zeros(sizes, hidden_activation);
        let layers = sizes.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut std = (2.0 / fan_in as f64).sqrt();
            if l + 1 == layers {
                std *= 0.1;
            }
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * std;
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let o = offset;
            offset += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite network input {x:?}")));
        }
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace);
        Ok(trace.activations.pop().expect("output"))
    }

    /// Forward pass that records intermediate values into `trace`.
    pub fn forward_trace(&self, x: &[f64], trace: &mut Trace) {
        let layers = self.sizes.len() - 1;
        trace.activations.resize(layers + 1, Vec::new());
        trace.pre.resize(layers, Vec::new());
        trace.activations[0].clear();
        trace.activations[0].extend_from_slice(x);
        for (l, (offset, n_in, n_out)) in self.layer_offsets().enumerate() {
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (before, after) = trace.activations.split_at_mut(l + 1);
            let input = &before[l];
            let pre = &mut trace.pre[l];
            pre.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    acc += wi * xi;
                }
                pre.push(acc);
            }
            let out = &mut after[0];
            out.clear();
            let hidden = l + 1 < layers;
            out.extend(pre.iter().map(|&z| match (hidden, self.hidden_activation) {
                (true, Activation::Relu) => z.max(0.0),
                _ => z,
            }));
        }
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (offset, n_in, n_out) = offsets[l];
            let input = &trace.activations[l];
            {
                let (gw, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[offset..offset + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *n += d * wi;
                }
            }
            if self.hidden_activation == Activation::Relu {
                for (n, z) in next.iter_mut().zip(&trace.pre[l - 1]) {
                    if *z <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            delta = next;
        }
    }

    fn weight_matrix(&self, offset: usize, n_in: usize, n_out: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(n_out, n_in, &self.params[offset..offset + n_in * n_out])
    }

    /// Forward pass over the columns of `x` (one sample per column).
    pub fn forward_batch(&self, x: DMatrix<f64>, trace: &mut BatchTrace) {
        let layers = self.sizes.len() - 1;
        trace.activations.clear();
        trace.pre.clear();
        trace.activations.push(x);
        for (l, (offset, n_in, n_out)) in self.layer_offsets().enumerate() {
            let w = self.weight_matrix(offset, n_in, n_out);
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let mut z = w * &trace.activations[l];
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let a = if l + 1 < layers && self.hidden_activation == Activation::Relu {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            trace.pre.push(z);
            trace.activations.push(a);
        }
    }

    /// Accumulate the summed parameter gradient of a batch given
    /// `d loss / d output` per column.
    pub fn backward_batch(&self, trace: &BatchTrace, grad_out: DMatrix<f64>, grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = grad_out;
        for l in (0..layers).rev() {
            let (offset, n_in, n_out) = offsets[l];
            let gw = &delta * trace.activations[l].transpose();
            let (gw_flat, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                for i in 0..n_in {
                    gw_flat[o * n_in + i] += gw[(o, i)];
                }
                gb[o] += delta.row(o).sum();
            }
            if l == 0 {
                break;
            }
            let mut next = self.weight_matrix(offset, n_in, n_out).transpose() * &delta;
            if self.hidden_activation == Activation::Relu {
                next.zip_apply(&trace.pre[l - 1], |n, z| {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                });
            }
            delta = next;
        }
    }

    /// Product of layer spectral norms (power iteration), an upper bound on
    /// the network's Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layer_offsets()
            .map(|(offset, n_in, n_out)| spectral_norm(&self.params[offset..offset + n_in * n_out], n_out, n_in))
            .product()
    }
}

fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum()).collect();
        let mut nv: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w[r * cols + c] * u[r]).sum()).collect();
        let n = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        nv.iter_mut().for_each(|x| *x /= n);
        v = nv;
        sigma = n.sqrt();
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pos: f64,
    pub w_rot: f64,
    pub w_open: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pos: 1.0,
            w_rot: 0.1,
            w_open: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_pos, self.w_rot, self.w_open];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Divide each weight by the squared output scale of its component so
    /// that, in network units, the three terms start out comparable.
    pub fn normalized_for(&self, norm: &Normalizer) -> LossWeights {
        let s2 = norm.output_scale.map(|s| s * s);
        LossWeights {
            w_pos: self.w_pos / ((s2[0] + s2[1] + s2[2]) / 3.0),
            w_rot: self.w_rot / (s2[3] + s2[4] + s2[5] + s2[6]),
            w_open: self.w_open / s2[7],
        }
    }
}

/// Weighted pose loss and its gradient with respect to the raw prediction.
pub fn composite_loss_grad(pred: &[f64], target: &[f64; ACTION_DIM], w: &LossWeights) -> Result<(f64, [f64; ACTION_DIM])> {
    let mut grad = [0.0; ACTION_DIM];
    let mut pos = 0.0;
    for i in 0..3 {
        let e = pred[i] - target[i];
        pos += e * e / 3.0;
        grad[i] = w.w_pos * 2.0 * e / 3.0;
    }
    let q = [pred[3], pred[4], pred[5], pred[6]];
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateQuaternion(n));
    }
    let u = q.map(|v| v / n);
    let t = [target[3], target[4], target[5], target[6]];
    let c: f64 = (0..4).map(|i| u[i] * t[i]).sum();
    // rounding can push c^2 a hair above one
    let rot = (1.0 - c * c).max(0.0);
    for i in 0..4 {
        grad[3 + i] = -2.0 * w.w_rot * c * (t[i] - c * u[i]) / n;
    }
    let e = pred[7] - target[7];
    grad[7] = w.w_open * 2.0 * e;
    let loss = w.w_pos * pos + w.w_rot * rot + w.w_open * e * e;
    Ok((loss, grad))
}

/// `w_pos * mean squared position error + w_rot * (1 - <q_hat, q>^2) + w_open * opening error^2`.
pub fn composite_loss(pred: &[f64], target: &Action, w: &LossWeights) -> Result<f64> {
    if pred.len() != ACTION_DIM {
        return Err(Error::InvalidArgument(format!("prediction needs {ACTION_DIM} values")));
    }
    Ok(composite_loss_grad(pred, &target.to_array(), w)?.0)
}

/// Affine maps applied around the network: inputs are standardized, outputs
/// are scaled from network units back to pose units. With `residual` the
/// network predicts the target pose as an offset from the observed pose.
/// Predicting orientation and opening directly invites a copy-the-input
/// solution whose slope drifts above one, and the closed loop then runs away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: [f64; STATE_DIM],
    pub input_std: [f64; STATE_DIM],
    pub output_mean: [f64; ACTION_DIM],
    pub output_scale: [f64; ACTION_DIM],
    pub residual: bool,
}

impl Normalizer {
    pub fn identity() -> Normalizer {
        Normalizer {
            input_mean: [0.0; STATE_DIM],
            input_std: [1.0; STATE_DIM],
            output_mean: [0.0; ACTION_DIM],
            output_scale: [1.0; ACTION_DIM],
            residual: false,
        }
    }

    pub fn fit(stats: &StateStats, pairs: &[(State, Action)], residual: bool) -> Normalizer {
        let floor = |s: f64| if s > 1e-8 { s } else { 1.0 };
        let n = pairs.len().max(1) as f64;
        let offsets: Vec<[f64; ACTION_DIM]> = pairs
            .iter()
            .map(|(s, a)| {
                let (x, y) = (s.pose.to_array(), a.to_array());
                std::array::from_fn(|d| if residual { y[d] - x[d] } else { y[d] })
            })
            .collect();
        let mut mean = [0.0; ACTION_DIM];
        for a in &offsets {
            for d in 0..ACTION_DIM {
                mean[d] += a[d] / n;
            }
        }
        let mut var = [0.0; ACTION_DIM];
        for a in &offsets {
            for d in 0..ACTION_DIM {
                var[d] += (a[d] - mean[d]).powi(2) / n;
            }
        }
        Normalizer {
            input_mean: stats.mean,
            input_std: stats.std().map(floor),
            output_mean: mean,
            output_scale: var.map(|v| floor(v.sqrt())),
            residual,
        }
    }

    pub fn standardize(&self, x: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        std::array::from_fn(|d| (x[d] - self.input_mean[d]) / self.input_std[d])
    }

    /// Pose-unit prediction from network output `y` for raw state `x`.
    pub fn destandardize(&self, y: &[f64], x: &[f64; STATE_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|d| {
            let base = if self.residual { x[d] } else { 0.0 };
            base + self.output_mean[d] + self.output_scale[d] * y[d]
        })
    }
}

/// Trained behavior-cloning policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcNetwork {
    pub mlp: Mlp,
    pub normalizer: Normalizer,
    pub frame: FrameTag,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl BcNetwork {
    /// Raw network output on an already standardized input.
    pub fn forward(&self, standardized: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(standardized)
    }

    /// Raw 8-D pose prediction in pose units (quaternion not yet normalized).
    pub fn predict_raw(&self, state: &State) -> Result<[f64; ACTION_DIM]> {
        if state.frame != self.frame {
            return Err(Error::Validation(format!(
                "network trained on {} states, got {}",
                self.frame, state.frame
            )));
        }
        let raw = state.to_array();
        let y = self.mlp.forward(&self.normalizer.standardize(&raw))?;
        Ok(self.normalizer.destandardize(&y, &raw))
    }

    /// Predicted action with the quaternion renormalized and canonicalized.
    pub fn predict(&self, state: &State) -> Result<Action> {
        let raw = self.predict_raw(state)?;
        let q = Quat([raw[3], raw[4], raw[5], raw[6]]);
        let n = q.norm();
        if !(n >= MIN_QUAT_NORM) {
            return Err(Error::DegenerateQuaternion(n));
        }
        Ok(Action {
            target: Pose::sanitized([raw[0], raw[1], raw[2]], q, raw[7]),
            frame: self.frame,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: self.mlp.sizes.clone(),
            activation: self.mlp.hidden_activation,
            frame: self.frame,
            loss_weights: self.loss_weights,
            seed: self.seed,
            normalizer: self.normalizer.clone(),
            params: self.mlp.params.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<BcNetwork> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        if file.architecture.first() != Some(&STATE_DIM) || file.architecture.last() != Some(&ACTION_DIM) {
            return Err(Error::Validation(format!("bad architecture {:?}", file.architecture)));
        }
        if file.params.len() != Mlp::param_count_for(&file.architecture) {
            return Err(Error::Validation(format!(
                "architecture {:?} needs {} parameters, file has {}",
                file.architecture,
                Mlp::param_count_for(&file.architecture),
                file.params.len()
            )));
        }
        Ok(BcNetwork {
            mlp: Mlp {
                sizes: file.architecture,
                hidden_activation: file.activation,
                params: file.params,
            },
            normalizer: file.normalizer,
            frame: file.frame,
            loss_weights: file.loss_weights,
            seed: file.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    architecture: Vec<usize>,
    activation: Activation,
    frame: FrameTag,
    loss_weights: LossWeights,
    seed: u64,
    normalizer: Normalizer,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the step size from `learning_rate` down to this
    /// fraction of it over the epochs; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Noise-injected corrective labels; `None` trains on clean states only.
    pub noise: Option<NoiseConfig>,
    pub loss_weights: LossWeights,
    /// Rescale `loss_weights` by the spread of each component on the data.
    pub normalize_loss: bool,
    /// Use every `stride`-th step of each demonstration.
    pub stride: usize,
    /// Predict the target pose as an offset from the observed pose.
    pub residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            momentum: 0.9,
            seed: 0,
            noise: None,
            loss_weights: LossWeights::default(),
            normalize_loss: true,
            stride: 1,
            residual: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidArgument("final_lr_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: BcNetwork,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD with momentum over shuffled (state, action) pairs.
pub fn train(demos: &DemoSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::InsufficientData("no demonstrations to train on".into()));
    }
    let stats = demos.stats()?.clone();
    let pairs: Vec<(State, Action)> = demos
        .trajectories()
        .iter()
        .flat_map(|t| t.steps.iter().step_by(cfg.stride).map(|s| (s.state, s.action)))
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise.map_or(0, |n| n.seed) ^ cfg.seed.rotate_left(17));
    // Output scaling follows the label spread the optimizer will actually
    // see, so with noise it is fitted on one noise-injected pass.
    let normalizer = match &cfg.noise {
        Some(noise) if cfg.residual => {
            let mut noisy = pairs.clone();
            inject_noise_in_place(&mut noisy, noise, &stats, &mut noise_rng)?;
            Normalizer::fit(&stats, &noisy, true)
        }
        _ => Normalizer::fit(&stats, &pairs, cfg.residual),
    };
    let weights = if cfg.normalize_loss {
        cfg.loss_weights.normalized_for(&normalizer)
    } else {
        cfg.loss_weights
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![STATE_DIM];
    sizes.extend_from_slice(&HIDDEN);
    sizes.push(ACTION_DIM);
    let mlp = Mlp::init(&sizes, Activation::Relu, &mut rng);
    let mut net = BcNetwork {
        mlp,
        normalizer,
        frame: demos.frame(),
        loss_weights: weights,
        seed: cfg.seed,
    };

    let p = net.mlp.param_count();
    let mut velocity = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut batch: Vec<(State, Action)> = Vec::with_capacity(cfg.batch_size);
    let mut trace = BatchTrace::default();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        let frac = cfg.final_lr_fraction;
        let lr = cfg.learning_rate * (frac + (1.0 - frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i]));
            if let Some(noise) = &cfg.noise {
                inject_noise_in_place(&mut batch, noise, &stats, &mut noise_rng)?;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let raw_inputs: Vec<[f64; STATE_DIM]> = batch.iter().map(|(s, _)| s.to_array()).collect();
            let x = DMatrix::from_iterator(
                STATE_DIM,
                batch.len(),
                raw_inputs.iter().flat_map(|x| net.normalizer.standardize(x)),
            );
            net.mlp.forward_batch(x, &mut trace);
            let out = trace.activations.last().expect("output");
            let mut g_out = DMatrix::zeros(ACTION_DIM, batch.len());
            for (j, (x_raw, (_, action))) in raw_inputs.iter().zip(&batch).enumerate() {
                let raw = net.normalizer.destandardize(out.column(j).as_slice(), x_raw);
                if raw.iter().any(|v| !v.is_finite()) {
                    loss_trace.push(f64::NAN);
                    return Err(Error::TrainingFailure { epoch, loss: f64::NAN, trace: loss_trace });
                }
                let (loss, g_pose) = composite_loss_grad(&raw, &action.to_array(), &weights)?;
                epoch_loss += loss;
                for d in 0..ACTION_DIM {
                    g_out[(d, j)] = g_pose[d] * net.normalizer.output_scale[d] * scale;
                }
            }
            net.mlp.backward_batch(&trace, g_out, &mut grad);
            for ((theta, v), g) in net.mlp.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *theta += *v;
            }
        }
        let mean = epoch_loss / pairs.len() as f64;
        loss_trace.push(mean);
        if !mean.is_finite() || mean > 1e6 {
            return Err(Error::TrainingFailure {
                epoch,
                loss: mean,
                trace: loss_trace,
            });
        }
    }
    Ok(TrainOutcome {
        network: net,
        loss_trace,
    })
}

/// Mean composite loss of the network over every pair of `demos`.
pub fn mean_loss(net: &BcNetwork, demos: &DemoSet) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, a) in demos.pairs() {
        total += composite_loss(&net.predict_raw(s)?, a, &net.loss_weights)?;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Mean unweighted (position, rotation, opening) loss terms over `demos`.
pub fn component_losses(net: &BcNetwork, demos: &DemoSet) -> Result<[f64; 3]> {
    let unit = [
        LossWeights { w_pos: 1.0, w_rot: 0.0, w_open: 0.0 },
        LossWeights { w_pos: 0.0, w_rot: 1.0, w_open: 0.0 },
        LossWeights { w_pos: 0.0, w_rot: 0.0, w_open: 1.0 },
    ];
    let mut total = [0.0; 3];
    let mut n = 0usize;
    for (s, a) in demos.pairs() {
        let raw = net.predict_raw(s)?;
        for (t, w) in total.iter_mut().zip(&unit) {
            *t += composite_loss(&raw, a, w)?;
        }
        n += 1;
    }
    Ok(total.map(|t| t / n.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a ReLU kink.
    pub excluded: usize,
}

/// Compare backprop against central finite differences (`h = 1e-5`) for
/// the parameters in `indices` on one standardized sample.
pub fn grad_check(mlp: &Mlp, input: &[f64], target: &[f64; ACTION_DIM], w: &LossWeights, indices: &[usize]) -> Result<GradCheck> {
    const H: f64 = 1e-5;
    let mut trace = Trace::default();
    mlp.forward_trace(input, &mut trace);
    let (_, g_out) = composite_loss_grad(trace.activations.last().expect("output"), target, w)?;
    let mut analytic = vec![0.0; mlp.param_count()];
    mlp.backward(&trace, &g_out, &mut analytic);
    let base_signs = relu_signs(&trace);

    let mut probe = mlp.clone();
    let mut max_rel = 0.0f64;
    let (mut checked, mut excluded) = (0, 0);
    for &i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + H;
        probe.forward_trace(input, &mut trace);
        let plus_signs = relu_signs(&trace);
        let lp = composite_loss_grad(trace.activations.last().expect("output"), target, w)?.0;
        probe.params[i] = orig - H;
        probe.forward_trace(input, &mut trace);
        let minus_signs = relu_signs(&trace);
        let lm = composite_loss_grad(trace.activations.last().expect("output"), target, w)?.0;
        probe.params[i] = orig;
        if mlp.hidden_activation == Activation::Relu && (plus_signs != base_signs || minus_signs != base_signs) {
            excluded += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked,
        excluded,
    })
}

fn relu_signs(trace: &Trace) -> Vec<bool> {
    let hidden = trace.pre.len().saturating_sub(1);
    trace.pre[..hidden].iter().flat_map(|l| l.iter().map(|z| *z > 0.0)).collect()
}

impl Policy for BcNetwork {
    fn name(&self) -> &str {
        "BC"
    }

    fn frame(&self) -> FrameTag {
        self.frame
    }

    fn act(&mut self, obs: &State, _env: &EnvState) -> Result<Action> {
        self.predict(obs)
    }
}

//! Single-stage multi-task training with an L1 objective and Adam.
//!
//! Each step draws a task uniformly, an image uniformly within it, and an
//! aligned random crop of the degraded/clean pair. The step RNG is derived
//! from `(seed, step)`, so a run resumed from a checkpoint continues exactly
//! as the uninterrupted run would.

mod data;
mod degrade;

pub use data::{
    aligned_crop, crop, flip_horizontal, reflect_pad_to, sample_batch, synthetic_denoise_dataset, BundleIndex, Dataset, Degradation, Pair,
    TaskData, TaskId, TaskSpec, TrainingSample,
};
pub use degrade::{add_gaussian_noise, synthesize_lowlight, synthesize_rain, synthetic_scene, RainParams};

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::network::{init_params, model_forward, stack_embeddings, Checkpoint, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.lmdir";
pub const LOG_FILE: &str = "train_log.jsonl";
const HISTORY_CAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crop: usize,
    pub batch: usize,
    pub iters: u64,
    pub lr: f64,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub bundle_root: PathBuf,
    pub network: NetworkConfig,
    pub log_every: u64,
    /// 0 disables periodic checkpoints; the final state is always written.
    pub checkpoint_every: u64,
    pub flip: bool,
    /// Directory for the checkpoint and the JSON-lines log.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale profile: tiny network, 500 iterations, 64-pixel crops.
    pub fn desk(tasks: Vec<TaskSpec>, bundle_root: impl Into<PathBuf>) -> Self {
        Self {
            crop: 64,
            batch: 2,
            iters: 500,
            lr: 2e-4,
            seed: 0,
            tasks,
            bundle_root: bundle_root.into(),
            network: NetworkConfig::tiny(),
            log_every: 10,
            checkpoint_every: 100,
            flip: true,
            out_dir: None,
        }
    }

    /// Paper-scale profile: full network, 128-pixel crops, batch 2,
    /// 300k iterations at a constant 2e-4.
    pub fn paper(tasks: Vec<TaskSpec>, bundle_root: impl Into<PathBuf>) -> Self {
        Self {
            crop: 128,
            iters: 300_000,
            network: NetworkConfig::default(),
            log_every: 100,
            checkpoint_every: 5000,
            ..Self::desk(tasks, bundle_root)
        }
    }

    pub fn profile(name: &str, tasks: Vec<TaskSpec>, bundle_root: impl Into<PathBuf>) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(tasks, bundle_root)),
            "paper" => Ok(Self::paper(tasks, bundle_root)),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?} (desk|paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let m = self.network.size_multiple();
        if self.crop == 0 || !self.crop.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!("crop {} must be a positive multiple of {m}", self.crop)));
        }
        if self.crop < crate::prompt::MIN_IMAGE_SIDE {
            return Err(Error::InvalidConfig(format!(
                "crop {} is below the image encoder minimum {}",
                self.crop,
                crate::prompt::MIN_IMAGE_SIDE
            )));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Update number `t` (1-based) of one tensor.
    pub fn update(&self, t: u64, param: &mut Tensor, m: &mut Tensor, v: &mut Tensor, grad: &Tensor) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = grad.data()[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Parameters, optimizer moments and recent losses. Every tensor is kept at
/// `f32` precision so checkpoints capture the state exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
    pub loss_history: VecDeque<f64>,
}

fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, t) in store.iter() {
        out.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
    }
    out
}

impl TrainState {
    pub fn new(config: NetworkConfig, params: ParamStore) -> Self {
        let (m, v) = (zeros_like(&params), zeros_like(&params));
        Self { step: 0, config, params, m, v, loss_history: VecDeque::new() }
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self::new(config, params))
    }

    /// Mean of the last `n` recorded losses.
    pub fn running_loss(&self, n: usize) -> Option<f64> {
        let k = self.loss_history.len().min(n);
        (k > 0).then(|| self.loss_history.iter().rev().take(k).sum::<f64>() / k as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.clone(), self.params.clone());
        ckpt.groups.insert("adam_m".into(), self.m.clone());
        ckpt.groups.insert("adam_v".into(), self.v.clone());
        ckpt.meta = json!({
            "step": self.step,
            "loss_history": self.loss_history.iter().collect::<Vec<_>>(),
        });
        ckpt
    }

    /// Restores a training state; checkpoints without optimizer moments
    /// start the moments at zero.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut state = Self::new(ckpt.config, ckpt.params);
        if let (Some(m), Some(v)) = (ckpt.groups.get("adam_m"), ckpt.groups.get("adam_v")) {
            state.m = m.clone();
            state.v = v.clone();
        }
        state.step = ckpt.meta.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        if let Some(h) = ckpt.meta.get("loss_history").and_then(|h| h.as_array()) {
            state.loss_history = h.iter().filter_map(|v| v.as_f64()).collect();
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Step RNG: a ChaCha stream selected by the step index.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn stack_images(images: &[&TensorImage]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        assert_eq!((img.height(), img.width()), (h, w), "batch images differ in size");
        data.extend(img.data().iter().map(|&v| v as f64));
    }
    Tensor::new([images.len(), h, w, 3], data)
}

/// Batched forward pass, L1 loss against the clean crops, gradients.
pub fn loss_and_grads(
    params: &ParamStore,
    batch: &[TrainingSample],
    config: &NetworkConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let g = Graph::new();
    let bound = params.bind(&g);
    let x = g.constant(stack_images(&batch.iter().map(|s| &s.degraded).collect::<Vec<_>>()));
    let target = stack_images(&batch.iter().map(|s| &s.clean).collect::<Vec<_>>());
    let e_d = g.constant(stack_embeddings(&batch.iter().map(|s| &s.bundle.e_d).collect::<Vec<_>>())?);
    let e_c = g.constant(stack_embeddings(&batch.iter().map(|s| &s.bundle.e_c).collect::<Vec<_>>())?);
    let refs: Vec<&TensorImage> = batch.iter().map(|s| &s.bundle.reference).collect();
    let y = model_forward(&g, &x, &e_d, &e_c, &refs, &bound.scope(), config)?;
    let loss = g.l1_loss(&y, &target);
    let value = loss.value().item();
    let grads = g.backward(&loss);
    let mut out = BTreeMap::new();
    for (name, t) in params.iter() {
        let var = bound.var(name).expect("every parameter is bound");
        let grad = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        out.insert(name.clone(), grad);
    }
    Ok((value, out))
}

/// One forward/backward/update. Returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[TrainingSample], lr: f64) -> Result<f64> {
    let next = state.step + 1;
    let (loss, grads) = match loss_and_grads(&state.params, batch, &state.config) {
        Err(Error::NonFiniteActivation(stage)) => {
            log::error!("step {next}: non-finite activation at {stage}");
            return Err(Error::NonFiniteLoss(next));
        }
        r => r?,
    };
    if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(next));
    }
    let adam = Adam::new(lr);
    for (name, grad) in &grads {
        let p = state.params.get_mut(name).expect("parameter");
        let m = state.m.get_mut(name).expect("first moment");
        let v = state.v.get_mut(name).expect("second moment");
        adam.update(next, p, m, v, grad);
    }
    state.params.round_to_f32();
    state.m.round_to_f32();
    state.v.round_to_f32();
    state.step = next;
    state.loss_history.push_back(loss);
    while state.loss_history.len() > HISTORY_CAP {
        state.loss_history.pop_front();
    }
    Ok(loss)
}

/// Runs until `config.iters`, starting from `state` (or fresh parameters).
/// Writes a JSON-lines log and checkpoints when `out_dir` is set. A
/// non-finite loss aborts without touching the last checkpoint.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    bundles: &BundleIndex,
    state: Option<TrainState>,
) -> Result<TrainState> {
    config.validate()?;
    let mut state = match state {
        Some(s) => {
            if s.config != config.network {
                return Err(Error::InvalidConfig("resumed state has a different network config".into()));
            }
            s
        }
        None => TrainState::init(config.network.clone(), config.seed)?,
    };
    let mut log = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let path = dir.join(LOG_FILE);
            Some(OpenOptions::new().create(true).append(true).open(&path).map_err(Error::io(path))?)
        }
        None => None,
    };
    let checkpoint_path = config.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut mix: BTreeMap<String, u64> = BTreeMap::new();
    let mut interval_loss = (0.0, 0u64);
    while state.step < config.iters {
        let mut rng = step_rng(config.seed, state.step);
        let batch = sample_batch(data, bundles, config.crop, config.batch, config.flip, &mut rng)?;
        for s in &batch {
            *mix.entry(s.task.to_string()).or_default() += 1;
        }
        let loss = train_step(&mut state, &batch, config.lr)?;
        interval_loss.0 += loss;
        interval_loss.1 += 1;
        if state.step % config.log_every == 0 || state.step == config.iters {
            let mean = interval_loss.0 / interval_loss.1 as f64;
            log::info!("step {} loss {mean:.5}", state.step);
            if let Some(f) = log.as_mut() {
                let record = json!({"step": state.step, "loss": mean, "lr": config.lr, "task_mix": mix});
                let path = config.out_dir.as_ref().expect("log implies out_dir").join(LOG_FILE);
                writeln!(f, "{record}").map_err(Error::io(path))?;
            }
            mix.clear();
            interval_loss = (0.0, 0);
        }
        if let Some(path) = &checkpoint_path {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                state.save(path)?;
            }
        }
    }
    if let Some(path) = &checkpoint_path {
        state.save(path)?;
    }
    Ok(state)
}

//! Mini-batch training with adaptive moments and early stopping.
//!
//! The loop owns its parameters exclusively: every batch builds a fresh
//! tape, stacks per-window forecasts into one `[B,H,N,2]` prediction, takes
//! one optimizer step, and discards the tape. Validation runs between
//! epochs over the full window set; the best-validation parameters are the
//! ones that ship in the checkpoint. Checkpoints are a single binary file:
//! magic, version, a JSON header (configs, normalization stats, graph
//! fingerprint, tensor manifest), then raw little-endian f64 buffers.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{NormStats, Window, CHANNELS};
use crate::graph::PipeGraph;
use crate::model::{BoundParams, HydroNet, HydroNetConfig, ModelError, ModelParams};
use crate::seeds;
use crate::tensor::{Tape, TapeId, Tensor, TensorError};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no windows to train on")]
    EmptyDataset,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint was trained on a different graph (stored {stored}, bound {bound})")]
    FingerprintMismatch { stored: String, bound: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a > 1e-6 validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            patience: 15,
            seed: 42,
            loss: LossKind::Mae,
        }
    }
}

/// Validation improvements smaller than this do not reset patience.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ] {
            if !(v > 0.0) {
                return Err(TrainError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::InvalidConfig("betas must be < 1".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Mean elementwise loss between equal-shaped tensors on the tape.
pub fn loss_on_tape(
    tape: &mut Tape,
    pred: TapeId,
    target: TapeId,
    kind: LossKind,
) -> Result<TapeId, TensorError> {
    let diff = tape.sub(pred, target)?;
    let per_elem = match kind {
        LossKind::Mae => tape.abs(diff),
        LossKind::Mse => tape.mul(diff, diff)?,
    };
    Ok(tape.mean(per_elem))
}

/// Plain-value counterpart of `loss_on_tape` for inference paths.
pub fn loss_value(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            details: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.len().max(1) as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| match kind {
            LossKind::Mae => (p - t).abs(),
            LossKind::Mse => (p - t) * (p - t),
        })
        .sum();
    Ok(total / n)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update, in parameter order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), state.m.len(), "one gradient per parameter");
    for ((name, _), g) in params.iter().zip(grads) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = grads[i].data();
        for (j, p) in p.data_mut().iter_mut().enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Stack window targets into one `[B,H,N,2]` tensor.
fn stack_targets(windows: &[&Window]) -> Tensor {
    let shape = windows[0].target.shape();
    let (h, n) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(&[windows.len(), h, n, CHANNELS]);
    let stride = h * n * CHANNELS;
    for (b, w) in windows.iter().enumerate() {
        out.data_mut()[b * stride..(b + 1) * stride].copy_from_slice(w.target.data());
    }
    out
}

/// Forward a batch, compute the loss, and return it with gradients in
/// parameter order (zero for parameters the loss never touched).
pub fn batch_loss_and_grads(
    model: &HydroNet,
    params: &ModelParams,
    batch: &[&Window],
    kind: LossKind,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let ids = params.register_leaves(&mut tape);
    let bound = BoundParams::new(params, &ids);
    let mut preds = Vec::with_capacity(batch.len());
    for w in batch {
        let x = tape.constant(w.input.clone());
        let y = model.forward_on_tape(&mut tape, x, &bound)?;
        let s = tape.value(y).shape().to_vec();
        let y4 = tape.reshape(y, vec![1, s[0], s[1], s[2]])?;
        preds.push(y4);
    }
    let pred = tape.concat(&preds, 0)?;
    let target = tape.constant(stack_targets(batch));
    let loss = loss_on_tape(&mut tape, pred, target, kind)?;
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, p))| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Mean loss of `params` over a full window set, without gradients.
/// Deterministic in window order, so a reloaded checkpoint reproduces its
/// stored value bit for bit.
pub fn validation_loss(
    model: &HydroNet,
    params: &ModelParams,
    windows: &[Window],
    kind: LossKind,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let pred = model.forward(&w.input, params)?;
        total += loss_value(&pred, &w.target, kind)? * pred.len() as f64;
        count += pred.len();
    }
    Ok(total / count as f64)
}

/// Per-epoch loop record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to resume or serve a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: HydroNetConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
    pub norm: NormStats,
    pub graph_fingerprint: String,
    pub best_val_loss: f64,
    pub epoch: usize,
}

impl Checkpoint {
    /// Reject serving a graph other than the one trained on.
    pub fn verify_graph(&self, graph: &PipeGraph) -> Result<(), TrainError> {
        let bound = graph_fingerprint(graph);
        if bound != self.graph_fingerprint {
            return Err(TrainError::FingerprintMismatch {
                stored: self.graph_fingerprint.clone(),
                bound,
            });
        }
        Ok(())
    }
}

/// Content hash of the frozen node and edge lists.
pub fn graph_fingerprint(graph: &PipeGraph) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(graph.nodes()).expect("node list serializes"));
    hasher.update(serde_json::to_vec(graph.edges()).expect("edge list serializes"));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Optimize a fresh model on `train_windows`, early-stopping on
/// `val_windows`; returns the best checkpoint and the full loss history.
pub fn train(
    graph: &PipeGraph,
    train_windows: &[Window],
    val_windows: &[Window],
    norm: &NormStats,
    model_config: &HydroNetConfig,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochStats>), TrainError> {
    train_config.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model = HydroNet::new(model_config.clone(), graph)?;
    let mut params = crate::model::init_params(model_config)?;
    let mut state = AdamState::new(&params);

    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut patience_anchor = f64::INFINITY;
    let mut since_improvement = 0usize;
    let mut history = Vec::new();

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 1..=train_config.max_epochs {
        let mut rng = seeds::epoch_rng(train_config.seed, epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let (loss, grads) =
                batch_loss_and_grads(&model, &params, &batch, train_config.loss)?;
            adam_step(&mut params, &grads, &mut state, train_config)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_windows.len() as f64;
        let val_loss = validation_loss(&model, &params, val_windows, train_config.loss)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        // Argmin retention is unconditional; patience only resets on
        // improvements large enough to beat float noise.
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if patience_anchor - val_loss > IMPROVEMENT_THRESHOLD {
            patience_anchor = val_loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= train_config.patience {
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        params: best_params,
        norm: norm.clone(),
        graph_fingerprint: graph_fingerprint(graph),
        best_val_loss: best_loss,
        epoch: best_epoch,
    };
    Ok((checkpoint, history))
}

const CKPT_MAGIC: &[u8; 8] = b"HYDRONET";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    model_config: HydroNetConfig,
    train_config: TrainConfig,
    norm: NormStats,
    graph_fingerprint: String,
    best_val_loss: f64,
    epoch: usize,
    manifest: Vec<ManifestEntry>,
}

/// Serialize a checkpoint: magic, version, length-prefixed JSON header,
/// then each tensor as raw little-endian f64 in manifest order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let header = CkptHeader {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        norm: ckpt.norm.clone(),
        graph_fingerprint: ckpt.graph_fingerprint.clone(),
        best_val_loss: ckpt.best_val_loss,
        epoch: ckpt.epoch,
        manifest: ckpt
            .params
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read back what `save_checkpoint` wrote, rejecting unknown versions,
/// malformed headers, and size mismatches.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| TrainError::CorruptCheckpoint("file shorter than magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::CorruptCheckpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| TrainError::CorruptCheckpoint("missing version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(TrainError::CorruptCheckpoint(format!(
            "unknown version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)
        .map_err(|_| TrainError::CorruptCheckpoint("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| TrainError::CorruptCheckpoint("truncated header".into()))?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("header: {e}")))?;

    let mut entries = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|_| {
            TrainError::CorruptCheckpoint(format!("truncated tensor {}", entry.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| TrainError::CorruptCheckpoint(format!("tensor {}: {e}", entry.name)))?;
        entries.push((entry.name.clone(), tensor));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TrainError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        params: ModelParams::from_entries(entries),
        norm: header.norm,
        graph_fingerprint: header.graph_fingerprint,
        best_val_loss: header.best_val_loss,
        epoch: header.epoch,
    })
}

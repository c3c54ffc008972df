//! Mini-batch training with validation-based model selection, plus
//! checkpoint serialization and training-history emission.
//!
//! The protocol: every epoch shuffles the training queries with a seeded
//! RNG, averages per-query gradients over each batch (fixed order), applies
//! one optimizer update per batch, then scores validation NDCG@10. The
//! checkpoint with the best validation score is returned; training stops
//! early once that score has not improved for `patience` epochs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::diff::{Tape, Tensor};
use crate::metrics;
use crate::model::{init_params, ModelConfig, ModelError, RsaModel};
use crate::objective::{total_loss_on_tape, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("non-finite loss at epoch {epoch} on query {qid}")]
    NanLoss { epoch: usize, qid: String },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn token(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn from_token(s: &str) -> Result<Self, TrainError> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(TrainError::BadConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Queries per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::BadConfig("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch size must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::BadConfig("max epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg10: f64,
    /// Wall-clock seconds for the epoch (not part of the emitted file).
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch number with the highest validation NDCG@10 (first on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Deterministic delimited text: epoch, train_loss, valid_ndcg10.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tvalid_ndcg10\n");
        for e in &self.epochs {
            out.push_str(&format!("{}\t{:.17e}\t{:.17e}\n", e.epoch, e.train_loss, e.valid_ndcg10));
        }
        out
    }
}

/// Adam moment estimates, aligned with the model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &RsaModel) -> Self {
        let zeros: Vec<Tensor> = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

pub fn sgd_step(params: &mut [(String, &mut Tensor)], grads: &[Tensor], config: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    for ((_, p), g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= config.learning_rate * gv;
        }
    }
}

pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = config.adam_beta1 * m[j] + (1.0 - config.adam_beta1) * gv;
            v[j] = config.adam_beta2 * v[j] + (1.0 - config.adam_beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
}

/// Average gradient of the total loss over a batch of query groups, in
/// canonical parameter order, plus the mean loss. Group order inside the
/// batch is fixed by ascending dataset index.
fn batch_gradients(
    model: &RsaModel,
    dataset: &Dataset,
    batch: &[usize],
    epoch: usize,
) -> Result<(Vec<Tensor>, f64), TrainError> {
    let mut acc: Vec<Tensor> = model
        .named_params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut loss_sum = 0.0;
    for &gi in batch {
        let group = &dataset.groups[gi];
        let tape = Tape::new();
        let (vars, flat) = model.vars(&tape);
        let features = tape.constant(group.features.clone());
        let loss = total_loss_on_tape(
            &vars,
            model.config.variant,
            &features,
            &group.relevance,
            dataset.k_max,
        )?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::NanLoss { epoch, qid: group.qid.clone() });
        }
        loss_sum += value;
        let grads = loss.backward();
        for (a, var) in acc.iter_mut().zip(&flat) {
            a.add_assign(&grads.wrt(var));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for a in &mut acc {
        *a = a.scale(scale);
    }
    Ok((acc, loss_sum * scale))
}

/// Train with seeded shuffling and per-epoch validation; returns the
/// best-validation checkpoint and the full history.
pub fn train(
    model: RsaModel,
    train_ds: &Dataset,
    valid_ds: &Dataset,
    config: &TrainConfig,
) -> Result<(RsaModel, TrainHistory), TrainError> {
    train_with_logger(model, train_ds, valid_ds, config, |_| {})
}

/// [`train`] with a per-epoch callback (progress printing and the like).
pub fn train_with_logger(
    model: RsaModel,
    train_ds: &Dataset,
    valid_ds: &Dataset,
    config: &TrainConfig,
    mut log: impl FnMut(&EpochRecord),
) -> Result<(RsaModel, TrainHistory), TrainError> {
    config.validate()?;
    for (name, ds) in [("train", train_ds), ("valid", valid_ds)] {
        if ds.feature_dim != model.config.feature_dim {
            let _ = name;
            return Err(ModelError::FeatureDimMismatch {
                expected: model.config.feature_dim,
                got: ds.feature_dim,
            }
            .into());
        }
    }

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&model);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_model = model.clone();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_ds.groups.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let (grads, batch_loss) = batch_gradients(&model, train_ds, &batch, epoch)?;
            let mut params = model.named_params_mut();
            match config.optimizer {
                OptimizerKind::Sgd => sgd_step(&mut params, &grads, config),
                OptimizerKind::Adam => adam_step(&mut params, &grads, &mut adam, config),
            }
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = if seen == 0 { 0.0 } else { epoch_loss / seen as f64 };

        let valid_ndcg10 = metrics::evaluate(&model, valid_ds)?.mean_ndcg_at(10);
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_ndcg10,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&record);
        history.push(record);

        if valid_ndcg10 > best_score {
            best_score = valid_ndcg10;
            best_epoch = epoch;
            best_model = model.clone();
        }
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    Ok((best_model, TrainHistory { epochs: history, best_epoch }))
}

// --- checkpoint format ------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"LTRCHKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Write a versioned binary checkpoint: magic, version, the config as
/// key-value text, then each named parameter as shape plus little-endian
/// f64 data. Loading reproduces the parameters bit for bit.
pub fn save_checkpoint(model: &RsaModel, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = model.config.to_kv();
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    let params = model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rows() as u64).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u64).to_le_bytes())?;
        for value in tensor.data() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

pub fn load_checkpoint(path: &Path) -> Result<RsaModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<8>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&config_text)?;

    let mut model = init_params(&config)?;
    let expected: Vec<(String, (usize, usize))> = model
        .named_params()
        .into_iter()
        .map(|(name, t)| (name, t.shape()))
        .collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} parameter arrays, file has {count}",
            expected.len()
        )));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let file_name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        if &file_name != name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter order mismatch: expected {name}, found {file_name}"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        if (rows, cols) != *shape {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for {name}: expected {}x{}, found {rows}x{cols}",
                shape.0, shape.1
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
        }
        loaded.push(Tensor::new(rows, cols, data));
    }

    for ((_, p), t) in model.named_params_mut().into_iter().zip(loaded) {
        *p = t;
    }
    Ok(model)
}

//! Mini-batch Adam training with seeded substreams and resumable checkpoints.

mod adam;
mod checkpoint;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Split};
use crate::model::{Batch, MhvaeParams, ModelConfig, ModelError};
use crate::mrd::{sample_mask, Mask, MaskConfig, MaskError};
use crate::numerics::{NormMode, NumericsError};
use crate::objective::{elbo_with_store, ElboNoise, KlScale, LossBreakdown, WarmupSchedule};
use crate::rng::{substream, Stream};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, FORMAT_VERSION, MAGIC,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch rows {rows:?}; last state saved to {checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        rows: Vec<usize>,
        checkpoint: Option<PathBuf>,
    },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<MaskError> for TrainError {
    fn from(e: MaskError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub warmup: WarmupSchedule,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub dataset: String,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Losses of one epoch, numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

pub struct FitResult {
    pub params: MhvaeParams<f32>,
    pub adam: AdamState<f32>,
    pub history: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Eval-mode loss over `rows` with every modality kept and noise fixed per batch.
pub fn validation_loss(
    params: &MhvaeParams<f32>,
    data: &Dataset,
    rows: &[usize],
    batch_size: usize,
    scale: KlScale,
    seed: u64,
) -> Result<Option<LossBreakdown>, TrainError> {
    let mut parts = Vec::new();
    for (b, chunk) in batches(rows, batch_size, None, 1).iter().enumerate() {
        let batch = data.batch(chunk);
        let masks = vec![Mask::all(params.n_modalities()); chunk.len()];
        let mut rng = substream(seed, Stream::Noise, &[u64::MAX, b as u64]);
        let noise = ElboNoise::sample(params, chunk.len(), &mut rng);
        let out = elbo_with_store(params, &params.store, &batch, &masks, scale, &noise, NormMode::Eval)?;
        parts.push((out.breakdown, chunk.len()));
    }
    Ok(LossBreakdown::weighted_mean(&parts))
}

fn check_dataset(config: &ModelConfig, data: &Dataset, split: &Split) -> Result<(), TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if let Some(&bad) = split.train.iter().chain(&split.val).find(|&&r| r >= data.len()) {
        return Err(TrainError::Config(format!("split index {bad} outside {} records", data.len())));
    }
    Batch {
        modalities: data.columns.iter().map(|c| c.select(&[0])).collect(),
    }
    .check(config)?;
    Ok(())
}

/// Trains from scratch or from `opts.resume`. Every random choice is keyed
/// by `(seed, epoch, batch)`, so a resumed run replays the remaining epochs
/// of an uninterrupted one exactly.
pub fn fit(
    config: &TrainConfig,
    data: &Dataset,
    split: &Split,
    mut opts: FitOptions<'_>,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    check_dataset(&config.model, data, split)?;
    let (mut params, mut adam, mut history, start) = match opts.resume.take() {
        Some(ck) => {
            if ck.train.model != config.model || ck.train.seed != config.seed {
                return Err(TrainError::Config(
                    "checkpoint model or seed differs from the configuration".into(),
                ));
            }
            (ck.params, ck.adam, ck.history, ck.epoch)
        }
        None => {
            let p = MhvaeParams::<f32>::init(&config.model, config.seed)?;
            let a = AdamState::new(&p.store);
            (p, a, Vec::new(), 0)
        }
    };
    let mask_cfg = MaskConfig::new(config.model.drop_probs())?;
    let seed = config.seed;
    let mut written = Vec::new();
    let snapshot = |params: &MhvaeParams<f32>, adam: &AdamState<f32>, history: &[EpochMetrics], epoch| Checkpoint {
        train: config.clone(),
        epoch,
        params: params.clone(),
        adam: adam.clone(),
        history: history.to_vec(),
    };

    for epoch in start..config.epochs {
        let scale = KlScale::at_epoch(epoch, &config.warmup);
        let e = epoch as u64;
        let mut parts = Vec::new();
        for (b, rows) in batches(&split.train, config.batch_size, Some((seed, epoch)), 2)
            .iter()
            .enumerate()
        {
            let batch = data.batch(rows);
            let mut mrng = substream(seed, Stream::Mask, &[e, b as u64]);
            let masks: Vec<Mask> = rows.iter().map(|_| sample_mask(&mask_cfg, &mut mrng)).collect();
            let mut nrng = substream(seed, Stream::Noise, &[e, b as u64]);
            let noise = ElboNoise::sample(&params, rows.len(), &mut nrng);
            let out = elbo_with_store(&params, &params.store, &batch, &masks, scale, &noise, NormMode::Train)?;
            if !out.breakdown.weighted_total.is_finite() {
                let checkpoint = match opts.checkpoint_dir {
                    Some(dir) => {
                        let path = dir.join("abort.ckpt");
                        save_checkpoint(&snapshot(&params, &adam, &history, epoch), &path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    rows: rows.clone(),
                    checkpoint,
                });
            }
            let grads = out.graph.backward(out.loss)?;
            out.graph.write_param_grads(&grads, &mut params.store);
            adam_step(&mut params.store, &mut adam, config.learning_rate)?;
            for (i, s) in out.bn_updates {
                params.bn_stats[i] = s;
            }
            parts.push((out.breakdown, rows.len()));
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train: LossBreakdown::weighted_mean(&parts).expect("at least one batch"),
            val: validation_loss(&params, data, &split.val, config.batch_size, scale, seed)?,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&metrics);
        }
        history.push(metrics);

        let done = epoch + 1;
        let due = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if let Some(dir) = opts.checkpoint_dir {
            if due || done == config.epochs {
                let path = dir.join(checkpoint_name(done));
                save_checkpoint(&snapshot(&params, &adam, &history, done), &path)?;
                written.push(path);
            }
        }
    }
    Ok(FitResult {
        params,
        adam,
        history,
        checkpoints: written,
    })
}

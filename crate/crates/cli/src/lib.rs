//! Command-line front end: training, likelihood evaluation, generation and
//! the two certification commands.

pub mod certify;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod pgm;
pub mod train;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use mhvae_core::data::{load_idx_pool, normalize_and_split, BimodalDataset, DataError};
use mhvae_core::evaluator::EvalError;
use mhvae_core::model::{Likelihood, ModelConfig, ModelError};
use mhvae_core::trainer::{load_checkpoint, Checkpoint, TrainError};

pub use config::{Override, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("certification failed: {0}")]
    Certification(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 certification failure, 2 usage or configuration, 3 environment or
    /// data, 4 numeric abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Certification(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            ModelError::Input(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Usage(m),
            EvalError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            EvalError::Model(m) => m.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mhvae", version, about = "Multimodal hierarchical VAE: train, evaluate, generate, certify")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metrics.csv to a fresh run directory.
    Train(train::TrainArgs),
    /// Importance-sampled log-likelihoods on the test split.
    Eval(evaluate::EvalArgs),
    /// Draw images from the prior.
    Sample(generate::SampleArgs),
    /// Generate one modality from another.
    Cross(generate::CrossArgs),
    /// Finite-difference check of the ELBO gradient in 64-bit arithmetic.
    Gradcheck(certify::GradcheckArgs),
    /// Compare importance-sampled likelihoods with exact ones on a linear-Gaussian model.
    Oracle(certify::OracleArgs),
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::cmd_train(&a, out),
        Command::Eval(a) => evaluate::cmd_eval(&a, out),
        Command::Sample(a) => generate::cmd_sample(&a, out),
        Command::Cross(a) => generate::cmd_cross(&a, out),
        Command::Gradcheck(a) => certify::cmd_gradcheck(&a, out),
        Command::Oracle(a) => certify::cmd_oracle(&a, out),
    }
}

/// Writes to standard output; a closed pipe is not an error worth a code.
pub(crate) fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(line);
    let _ = out.write_all(b"\n");
}

pub fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(e.to_string()))
}

/// Loads the dataset named in the configuration, split as configured.
pub fn load_dataset(cfg: &RunConfig, model: &ModelConfig) -> Result<BimodalDataset, CliError> {
    let dir = cfg.data.resolve_dir(&cfg.train.dataset);
    if !dir.is_dir() {
        return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
    }
    let classes = model
        .modalities
        .iter()
        .find_map(|m| match m.likelihood {
            Likelihood::Categorical { classes } => Some(classes),
            _ => None,
        })
        .ok_or_else(|| CliError::Config("IDX datasets need a categorical label modality".into()))?;
    let (images, labels) = load_idx_pool(&dir)?;
    let ds = normalize_and_split(&images, &labels, classes, cfg.data.subset, cfg.data.split_seed)?;
    if ds.data.names.len() != model.n_modalities() {
        return Err(CliError::Config(format!(
            "dataset has {} modalities, the model {}",
            ds.data.names.len(),
            model.n_modalities()
        )));
    }
    Ok(ds)
}

/// Creates `dir` or, without one, `<parent>/<timestamp>-<kind>`. Refuses
/// directories that already hold files so runs never append.
pub fn fresh_run_dir(dir: Option<&Path>, parent: &Path, kind: &str) -> Result<PathBuf, CliError> {
    let path = match dir {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = parent.join(format!("{stamp}-{kind}"));
            let mut p = base.clone();
            let mut n = 1;
            while p.exists() {
                n += 1;
                p = PathBuf::from(format!("{}-{n}", base.display()));
            }
            p
        }
    };
    if path.is_dir() {
        let mut entries = std::fs::read_dir(&path).map_err(|e| CliError::io(&path, e))?;
        if entries.next().is_some() {
            return Err(CliError::Usage(format!("run directory {} is not empty", path.display())));
        }
    }
    std::fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Resolves a modality by name or one-letter tag.
pub fn modality(model: &ModelConfig, key: &str) -> Result<usize, CliError> {
    model.modality_index(key).ok_or_else(|| {
        let known: Vec<String> = model
            .modalities
            .iter()
            .map(|m| format!("{} ({})", m.name, m.tag()))
            .collect();
        CliError::Usage(format!("unknown modality `{key}`; known: {}", known.join(", ")))
    })
}

/// Parses `I,L` or `image,label` into sorted modality indices.
pub fn modality_set(model: &ModelConfig, spec: &str) -> Result<Vec<usize>, CliError> {
    let mut v = spec
        .split(',')
        .map(|k| modality(model, k.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Pixel grid of an image modality: the last two input dimensions, or a
/// square for flat inputs.
pub fn image_shape(model: &ModelConfig, i: usize) -> Option<(usize, usize)> {
    let shape = &model.modalities[i].input_shape;
    match shape.len() {
        0 => None,
        1 => {
            let side = (shape[0] as f64).sqrt().round() as usize;
            (side * side == shape[0]).then_some((side, side))
        }
        n => {
            let lead: usize = shape[..n - 2].iter().product();
            (lead == 1).then_some((shape[n - 1], shape[n - 2]))
        }
    }
}

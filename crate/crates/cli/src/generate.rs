use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use mhvae_core::model::{
    cross_modal_infer, generate_from_prior, Batch, Likelihood, ModalityBatch, ModelConfig, Reconstruction,
};
use mhvae_core::numerics::Tensor;
use mhvae_core::rng::{substream, Stream};

use crate::pgm::Greymap;
use crate::{image_shape, modality, open_checkpoint, say, CliError};

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `label=3` for a class, or `image=digit.pgm` for an image file.
    #[arg(long, value_name = "MODALITY=VALUE")]
    pub given: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn first_image(model: &ModelConfig) -> Result<(usize, (usize, usize)), CliError> {
    (0..model.n_modalities())
        .find_map(|i| {
            let bern = matches!(model.modalities[i].likelihood, Likelihood::Bernoulli);
            image_shape(model, i).filter(|_| bern).map(|s| (i, s))
        })
        .ok_or_else(|| CliError::Usage("the model has no image modality".into()))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_images(
    rec: &Reconstruction,
    (w, h): (usize, usize),
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, CliError> {
    let len = w * h;
    rec.means
        .data()
        .chunks(len)
        .enumerate()
        .map(|(r, px)| {
            let path = dir.join(format!("{prefix}_{r:04}.pgm"));
            Greymap::from_intensities(w, h, px).write(&path)?;
            Ok(path)
        })
        .collect()
}

fn check_n(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_n(args.n)?;
    let ck = open_checkpoint(&args.checkpoint)?;
    let (img, shape) = first_image(&ck.train.model)?;
    prepare_out(&args.out)?;
    let mut rng = substream(args.seed, Stream::Sample, &[0]);
    let rec = generate_from_prior(&ck.params, args.n, &mut rng)?;
    let files = write_images(&rec[img], shape, &args.out, "sample")?;
    say(out, format_args!("wrote {} images to {}", files.len(), args.out.display()));
    Ok(())
}

/// Class probabilities averaged over rows.
fn mean_distribution(rec: &Reconstruction) -> Vec<f64> {
    let shape = rec.means.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut acc = vec![0.0; cols];
    for row in rec.means.data().chunks(cols) {
        for (a, p) in acc.iter_mut().zip(row) {
            *a += p / rows as f64;
        }
    }
    acc
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

pub fn cmd_cross(args: &CrossArgs, out: &mut dyn Write) -> Result<(), CliError> {
    check_n(args.n)?;
    let ck = open_checkpoint(&args.checkpoint)?;
    let model = &ck.train.model;
    let (key, value) = args
        .given
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--given `{}` is not MODALITY=VALUE", args.given)))?;
    let given = modality(model, key)?;
    let n = args.n;
    let spec = &model.modalities[given];

    let mut columns: Vec<ModalityBatch<f32>> = model
        .modalities
        .iter()
        .map(|m| match m.likelihood {
            Likelihood::Categorical { classes } => ModalityBatch::one_hot(vec![0; n], classes),
            _ => ModalityBatch::dense(Tensor::zeros(&[n, m.input_len()])),
        })
        .collect();
    columns[given] = match spec.likelihood {
        Likelihood::Categorical { classes } => {
            let c: usize = value
                .parse()
                .ok()
                .filter(|&c| c < classes)
                .ok_or_else(|| CliError::Usage(format!("`{value}` is not a class below {classes}")))?;
            ModalityBatch::one_hot(vec![c; n], classes)
        }
        _ => {
            let g = Greymap::read(Path::new(value))?;
            if g.pixels.len() != spec.input_len() {
                return Err(CliError::Data(format!(
                    "{value} is {}x{}, modality {} expects {} pixels",
                    g.width,
                    g.height,
                    spec.name,
                    spec.input_len()
                )));
            }
            let px: Vec<f32> = (0..n).flat_map(|_| g.intensities()).collect();
            ModalityBatch::dense(Tensor::new(&[n, spec.input_len()], px).expect("sized"))
        }
    };
    let batch = Batch { modalities: columns };
    let mut rng = substream(args.seed, Stream::Sample, &[1]);
    let rec = cross_modal_infer(&ck.params, &batch, &[given], Some(&mut rng))?;

    prepare_out(&args.out)?;
    let label = model
        .modalities
        .iter()
        .position(|m| matches!(m.likelihood, Likelihood::Categorical { .. }));
    let mut tag = match spec.likelihood {
        Likelihood::Categorical { .. } => value.to_string(),
        _ => spec.name.clone(),
    };
    if let Some(l) = label {
        let dist = mean_distribution(&rec[l]);
        if l != given {
            tag = argmax(&dist).to_string();
        }
        say(out, format_args!("{} distribution:", model.modalities[l].name));
        for (c, p) in dist.iter().enumerate() {
            say(out, format_args!("  {c}: {p:.4}"));
        }
    }
    if let Ok((img, shape)) = first_image(model) {
        let files = write_images(&rec[img], shape, &args.out, &format!("cross_{tag}"))?;
        say(out, format_args!("wrote {} images to {}", files.len(), args.out.display()));
    }
    Ok(())
}

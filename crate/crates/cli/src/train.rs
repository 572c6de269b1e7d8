use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use mhvae_core::model::ModelConfig;
use mhvae_core::objective::LossBreakdown;
use mhvae_core::trainer::{fit, EpochMetrics, FitOptions};

use crate::config::{Override, RunConfig};
use crate::{fresh_run_dir, load_dataset, open_checkpoint, say, CliError};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-key override applied after loading, e.g. `train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<Override>,
    /// Write into this directory instead of a timestamped one under `output_dir`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run with the same model and seed.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn metrics_header(model: &ModelConfig) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "split".to_string()];
    h.extend(model.modalities.iter().map(|m| format!("recon_{}", m.name)));
    h.extend(model.modalities.iter().map(|m| format!("kl_{}", m.name)));
    h.push("kl_core".into());
    h.push("weighted_total".into());
    h
}

fn metrics_row(epoch: usize, split: &str, b: &LossBreakdown) -> Vec<String> {
    let mut r = vec![epoch.to_string(), split.to_string()];
    r.extend(b.recon.iter().map(f64::to_string));
    r.extend(b.kl_modality.iter().map(f64::to_string));
    r.push(b.kl_core.to_string());
    r.push(b.weighted_total.to_string());
    r
}

/// Appends the train and validation rows of one epoch.
pub fn write_epoch(w: &mut csv::Writer<File>, m: &EpochMetrics) -> csv::Result<()> {
    w.write_record(metrics_row(m.epoch, "train", &m.train))?;
    if let Some(v) = &m.val {
        w.write_record(metrics_row(m.epoch, "val", v))?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let resume = args.resume.as_deref().map(open_checkpoint).transpose()?;
    let ds = load_dataset(&cfg, &cfg.train.model)?;
    let dir = fresh_run_dir(args.run_dir.as_deref(), &cfg.output_dir, "train")?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write("config.json", cfg.to_json())?;
    let mut applied = serde_json::to_string_pretty(&args.overrides).expect("overrides serialize");
    applied.push('\n');
    write("overrides.json", applied)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;

    let metrics_path = dir.join("metrics.csv");
    let timing_path = dir.join("timing.csv");
    let csv_err = |p: &PathBuf, e: csv::Error| CliError::Data(format!("{}: {e}", p.display()));
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(|e| csv_err(&metrics_path, e))?;
    let mut timing = csv::Writer::from_path(&timing_path).map_err(|e| csv_err(&timing_path, e))?;
    metrics
        .write_record(metrics_header(&cfg.train.model))
        .map_err(|e| csv_err(&metrics_path, e))?;
    timing
        .write_record(["epoch", "wallclock_s"])
        .map_err(|e| csv_err(&timing_path, e))?;
    if let Some(ck) = &resume {
        for m in &ck.history {
            write_epoch(&mut metrics, m).map_err(|e| csv_err(&metrics_path, e))?;
        }
    }

    say(
        out,
        format_args!(
            "training on {} records ({} train, {} val) into {}",
            ds.data.len(),
            ds.split.train.len(),
            ds.split.val.len(),
            dir.display()
        ),
    );
    let start = Instant::now();
    let total = cfg.train.epochs;
    let mut failure: Option<CliError> = None;
    let mut on_epoch = |m: &EpochMetrics| {
        let secs = start.elapsed().as_secs_f64();
        let res = write_epoch(&mut metrics, m)
            .map_err(|e| csv_err(&metrics_path, e))
            .and_then(|_| {
                timing
                    .write_record([m.epoch.to_string(), format!("{secs:.3}")])
                    .and_then(|_| Ok(timing.flush()?))
                    .map_err(|e| csv_err(&timing_path, e))
            });
        if let Err(e) = res {
            failure.get_or_insert(e);
        }
        let val = m
            .val
            .as_ref()
            .map_or("-".to_string(), |v| format!("{:.3}", v.weighted_total));
        say(
            out,
            format_args!(
                "epoch {}/{total}  train {:.3}  val {val}  {secs:.1}s",
                m.epoch, m.train.weighted_total
            ),
        );
    };
    let result = fit(
        &cfg.train,
        &ds.data,
        &ds.split,
        FitOptions {
            checkpoint_dir: Some(&ckpt_dir),
            resume,
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(last) = result.checkpoints.last() {
        say(out, format_args!("final checkpoint {}", last.display()));
    }
    Ok(())
}

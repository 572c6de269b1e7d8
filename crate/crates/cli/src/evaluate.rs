use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};

use mhvae_core::evaluator::{estimate_conditional, estimate_joint, estimate_marginal, LLEstimate};
use mhvae_core::model::{Batch, MhvaeParams, ModelConfig};

use crate::config::{Override, RunConfig};
use crate::{fresh_run_dir, load_dataset, modality, modality_set, open_checkpoint, say, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Marginal,
    Joint,
    Conditional,
}

impl Metric {
    fn as_str(self) -> &'static str {
        match self {
            Metric::Marginal => "marginal",
            Metric::Joint => "joint",
            Metric::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration for the data location and split. Defaults to the
    /// `config.json` of the run that wrote the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<Override>,
    /// Repeatable; every metric is paired with every input subset.
    #[arg(long, value_enum)]
    pub metric: Vec<Metric>,
    /// Modalities fed to the core encoder, e.g. `I`, `L` or `I,L`. Repeatable.
    #[arg(long)]
    pub input: Vec<String>,
    /// Scored modality of marginal and conditional metrics. Defaults to the
    /// first modality (marginal) or the first one outside the input (conditional).
    #[arg(long)]
    pub target: Option<String>,
    /// The five rows of the standard image/label table.
    #[arg(long, conflicts_with_all = ["metric", "input"])]
    pub table: bool,
    /// Importance samples per datapoint.
    #[arg(long)]
    pub k: Option<usize>,
    /// Use only the first N test records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub metric: Metric,
    pub input: Vec<usize>,
    pub target: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub request: Request,
    pub quantity: String,
    pub input: String,
    pub estimate: LLEstimate,
    pub n: usize,
}

/// Table rows: `log p(x1)` [I], `log p(x1,x2)` [I], [L], [I,L], `log p(x1|x2)` [L].
pub fn table_requests(model: &ModelConfig) -> Result<Vec<Request>, CliError> {
    if model.n_modalities() != 2 {
        return Err(CliError::Usage("--table needs a two-modality model".into()));
    }
    let r = |metric, input: &[usize], target| Request {
        metric,
        input: input.to_vec(),
        target,
    };
    Ok(vec![
        r(Metric::Marginal, &[0], Some(0)),
        r(Metric::Joint, &[0], None),
        r(Metric::Joint, &[1], None),
        r(Metric::Joint, &[0, 1], None),
        r(Metric::Conditional, &[1], Some(0)),
    ])
}

fn resolve_target(model: &ModelConfig, req: &Request) -> Result<usize, CliError> {
    match (req.metric, req.target) {
        (_, Some(t)) => Ok(t),
        (Metric::Conditional, None) => (0..model.n_modalities())
            .find(|i| !req.input.contains(i))
            .ok_or_else(|| CliError::Usage("a conditional needs a modality outside the input".into())),
        _ => Ok(0),
    }
}

pub fn evaluate_requests(
    params: &MhvaeParams<f32>,
    data: &Batch<f32>,
    requests: &[Request],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, CliError> {
    let model = &params.config;
    let names: Vec<&str> = model.modalities.iter().map(|m| m.name.as_str()).collect();
    let tags = |s: &[usize]| s.iter().map(|&i| model.modalities[i].tag()).collect::<Vec<_>>().join(",");
    let mut rows = Vec::with_capacity(requests.len());
    for req in requests {
        let (estimate, quantity) = match req.metric {
            Metric::Joint => (
                estimate_joint(params, data, &req.input, k, inner, seed)?,
                format!("log p({})", names.join(",")),
            ),
            Metric::Marginal => {
                let j = resolve_target(model, req)?;
                (
                    estimate_marginal(params, data, j, &req.input, k, inner, seed)?,
                    format!("log p({})", names[j]),
                )
            }
            Metric::Conditional => {
                let j = resolve_target(model, req)?;
                if req.input.contains(&j) {
                    return Err(CliError::Usage(format!(
                        "conditional target {} is also an input",
                        names[j]
                    )));
                }
                let given: Vec<&str> = req.input.iter().map(|&i| names[i]).collect();
                (
                    estimate_conditional(params, data, j, &req.input, k, inner, seed)?,
                    format!("log p({}|{})", names[j], given.join(",")),
                )
            }
        };
        rows.push(EvalRow {
            request: req.clone(),
            quantity,
            input: tags(&req.input),
            estimate,
            n: data.rows(),
        });
    }
    Ok(rows)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["metric", "quantity", "input", "estimate", "std_error", "k", "n"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.request.metric.as_str().to_string(),
            r.quantity.clone(),
            r.input.clone(),
            r.estimate.value.to_string(),
            r.estimate.std_error.to_string(),
            r.estimate.k.to_string(),
            r.n.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn default_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.parent()?.join("config.json");
    p.is_file().then_some(p)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = open_checkpoint(&args.checkpoint)?;
    let cfg_path = match &args.config {
        Some(p) => p.clone(),
        None => default_config(&args.checkpoint).ok_or_else(|| {
            CliError::Usage("no --config given and no config.json next to the checkpoint's run".into())
        })?,
    };
    let cfg = RunConfig::load(&cfg_path, &args.overrides)?;
    let model = &ck.train.model;

    let requests = if args.table {
        table_requests(model)?
    } else {
        if args.metric.is_empty() || args.input.is_empty() {
            return Err(CliError::Usage("give --table or at least one --metric and --input".into()));
        }
        let target = args.target.as_deref().map(|t| modality(model, t)).transpose()?;
        let inputs = args
            .input
            .iter()
            .map(|s| modality_set(model, s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut v = Vec::new();
        for &metric in &args.metric {
            for input in &inputs {
                v.push(Request {
                    metric,
                    input: input.clone(),
                    target: if metric == Metric::Joint { None } else { target },
                });
            }
        }
        v
    };
    let k = args.k.unwrap_or(cfg.eval.k);
    let seed = args.seed.unwrap_or(cfg.eval.seed);
    if k == 0 {
        return Err(CliError::Usage("K must be at least 1".into()));
    }

    let ds = load_dataset(&cfg, model)?;
    let mut test = ds.split.test.clone();
    if let Some(n) = args.limit.or(cfg.eval.test_limit) {
        test.truncate(n);
    }
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let data = ds.data.batch(&test);
    let dir = fresh_run_dir(args.run_dir.as_deref(), &cfg.output_dir, "eval")?;
    let rows = evaluate_requests(&ck.params, &data, &requests, k, cfg.eval.inner_batch, seed)?;

    say(
        out,
        format_args!(
            "{:<12} {:<22} {:<6} {:>14} {:>10} {:>7} {:>6}",
            "metric", "quantity", "input", "estimate", "std_err", "K", "n"
        ),
    );
    for r in &rows {
        say(
            out,
            format_args!(
                "{:<12} {:<22} {:<6} {:>14.3} {:>10.3} {:>7} {:>6}",
                r.request.metric.as_str(),
                r.quantity,
                r.input,
                r.estimate.value,
                r.estimate.std_error,
                r.estimate.k,
                r.n
            ),
        );
    }
    let csv_path = dir.join("eval.csv");
    write_eval_csv(&csv_path, &rows)?;
    say(out, format_args!("wrote {}", csv_path.display()));
    Ok(())
}

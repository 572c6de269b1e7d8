use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use rand::Rng;

use mhvae_core::data::synth_linear_gaussian;
use mhvae_core::evaluator::{estimate_many, OracleDims};
use mhvae_core::model::{Batch, Likelihood, MhvaeParams, ModalityBatch, ModelConfig};
use mhvae_core::mrd::{sample_mask, Mask, MaskConfig};
use mhvae_core::numerics::{GradCheckConfig, GradCheckReport, Tensor};
use mhvae_core::objective::{certify_gradients, ElboNoise};
use mhvae_core::rng::{substream, Stream};

use crate::config::{Override, RunConfig};
use crate::{say, CliError};

pub const GRADCHECK_BATCH: usize = 4;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<Override>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries probed per parameter tensor; 0 probes all of them.
    #[arg(long, default_value_t = 24)]
    pub entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Initial central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Adds this offset to every analytic gradient. A nonzero value must
    /// make the check fail.
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub corrupt: f64,
}

/// Random inputs of the configured shapes: uniform intensities, uniform
/// classes, standard-normal Gaussian observations.
pub fn synthetic_batch(model: &ModelConfig, rows: usize, seed: u64) -> Batch<f64> {
    let mut rng = substream(seed, Stream::Sample, &[u64::MAX]);
    let modalities = model
        .modalities
        .iter()
        .map(|m| match m.likelihood {
            Likelihood::Bernoulli => ModalityBatch::dense(Tensor::uniform(&[rows, m.input_len()], 0.0, 1.0, &mut rng)),
            Likelihood::Categorical { classes } => {
                ModalityBatch::one_hot((0..rows).map(|_| rng.random_range(0..classes)).collect(), classes)
            }
            Likelihood::Gaussian { .. } => ModalityBatch::dense(Tensor::randn(&[rows, m.input_len()], &mut rng)),
        })
        .collect();
    Batch { modalities }
}

pub fn gradcheck(model: &ModelConfig, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport, CliError> {
    let params = MhvaeParams::<f64>::init(model, seed)?;
    let batch = synthetic_batch(model, GRADCHECK_BATCH, seed);
    let mask_cfg = MaskConfig::new(model.drop_probs()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut mrng = substream(seed, Stream::Mask, &[u64::MAX]);
    let masks: Vec<Mask> = (0..GRADCHECK_BATCH).map(|_| sample_mask(&mask_cfg, &mut mrng)).collect();
    let noise = ElboNoise::sample(&params, GRADCHECK_BATCH, &mut substream(seed, Stream::Noise, &[u64::MAX]));
    Ok(certify_gradients(&params, &batch, &masks, &noise, cfg)?)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let run = RunConfig::load(&args.config, &args.overrides)?;
    let cfg = GradCheckConfig {
        eps: args.eps,
        rel_tol: args.tolerance,
        max_entries: (args.entries > 0).then_some(args.entries),
        seed: args.seed,
        analytic_perturbation: args.corrupt,
        ..GradCheckConfig::default()
    };
    let report = gradcheck(&run.train.model, args.seed, &cfg)?;
    say(out, format_args!("{:<28} {:>8} {:>12}", "parameter", "entries", "max_rel_err"));
    for p in &report.params {
        let flag = if p.max_rel_error <= report.rel_tol { "" } else { "  FAIL" };
        say(
            out,
            format_args!("{:<28} {:>8} {:>12.3e}{flag}", p.name, p.entries_checked, p.max_rel_error),
        );
    }
    let worst = report.worst().expect("model has parameters");
    if report.passed() {
        say(
            out,
            format_args!("PASS: max relative error {:.3e} ({})", worst.max_rel_error, worst.name),
        );
        Ok(())
    } else {
        Err(CliError::Certification(format!(
            "`{}` entry {}: analytic {:.6e} vs numeric {:.6e}, relative error {:.3e} > {:.1e}",
            worst.name, worst.worst_index, worst.analytic, worst.numeric, worst.max_rel_error, report.rel_tol
        )))
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of oracle models, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 1000, 10000])]
    pub k: Vec<usize>,
    /// Datapoints per oracle.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub zc: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 2])]
    pub z: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 3])]
    pub x: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub inner: usize,
}

/// Largest accepted bias in nats at `k` importance samples; small `k` is
/// reported without a threshold.
pub fn oracle_threshold(k: usize) -> Option<f64> {
    match k {
        k if k >= 10_000 => Some(0.05),
        k if k >= 1_000 => Some(0.1),
        k if k >= 100 => Some(0.5),
        _ => None,
    }
}

/// Mean `IS − exact` over the datapoints of one oracle for one metric.
#[derive(Clone, Debug)]
pub struct OracleRow {
    pub seed: u64,
    pub k: usize,
    pub metric: String,
    pub bias: f64,
}

/// Marginals use `S = {j}`, the joint uses every modality, and `p(x_j | x_G)`
/// is the joint minus the marginal of `G` on the draws of `S = G`.
pub fn oracle_biases(dims: &OracleDims, n: usize, seed: u64, ks: &[usize], inner: usize) -> Result<Vec<OracleRow>, CliError> {
    let synth = synth_linear_gaussian(dims, n, seed)?;
    let (data, oracle) = (&synth.data, &synth.oracle);
    let m = dims.x.len();
    let all: Vec<usize> = (0..m).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = Vec::new();
    for &k in ks {
        let est_seed = seed.wrapping_add(0x5eed);
        let joint = estimate_many(&oracle.params, data, &all, &[&all], k, inner, est_seed)?;
        let exact: Vec<f64> = (0..n).map(|r| oracle.exact_log_likelihood(data, r, &all)).collect();
        let err: Vec<f64> = joint[0].iter().zip(&exact).map(|(a, b)| a - b).collect();
        rows.push(OracleRow {
            seed,
            k,
            metric: "joint".into(),
            bias: mean(&err),
        });
        for j in 0..m {
            let v = estimate_many(&oracle.params, data, &[j], &[&[j], &all], k, inner, est_seed)?;
            let marg: Vec<f64> = (0..n).map(|r| v[0][r] - oracle.exact_log_likelihood(data, r, &[j])).collect();
            rows.push(OracleRow {
                seed,
                k,
                metric: format!("marginal x{}", j + 1),
                bias: mean(&marg),
            });
            if m == 2 {
                let t = 1 - j;
                let cond: Vec<f64> = (0..n)
                    .map(|r| v[1][r] - v[0][r] - oracle.exact_conditional(data, r, t, &[j]))
                    .collect();
                rows.push(OracleRow {
                    seed,
                    k,
                    metric: format!("conditional x{}|x{}", t + 1, j + 1),
                    bias: mean(&cond),
                });
            }
        }
    }
    Ok(rows)
}

pub fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dims = OracleDims {
        zc: args.zc,
        z: args.z.clone(),
        x: args.x.clone(),
    };
    if dims.z.len() != dims.x.len() || dims.z.is_empty() {
        return Err(CliError::Usage("--z and --x need one entry per modality".into()));
    }
    if args.n == 0 || args.seeds == 0 || args.k.contains(&0) || args.inner == 0 {
        return Err(CliError::Usage("--n, --seeds, --inner and every K must be positive".into()));
    }
    let mut rows = Vec::new();
    for s in args.seed..args.seed + args.seeds {
        rows.extend(oracle_biases(&dims, args.n, s, &args.k, args.inner)?);
    }
    say(
        out,
        format_args!("{:<20} {:>7} {:>12} {:>10} {:>6}", "metric", "K", "max |bias|", "threshold", ""),
    );
    let mut failures = Vec::new();
    for &k in &args.k {
        let mut metrics: Vec<&str> = Vec::new();
        for r in rows.iter().filter(|r| r.k == k) {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        for metric in metrics {
            let worst = rows
                .iter()
                .filter(|r| r.k == k && r.metric == metric)
                .max_by(|a, b| a.bias.abs().total_cmp(&b.bias.abs()))
                .expect("rows exist");
            let th = oracle_threshold(k);
            let verdict = match th {
                Some(t) if worst.bias.abs() <= t => "ok",
                Some(_) => "FAIL",
                None => "",
            };
            if verdict == "FAIL" {
                failures.push(format!(
                    "{metric} at K={k}, seed {}: |bias| {:.4} > {}",
                    worst.seed,
                    worst.bias.abs(),
                    th.expect("thresholded")
                ));
            }
            let th = th.map_or("-".to_string(), |t| t.to_string());
            say(
                out,
                format_args!("{metric:<20} {k:>7} {:>12.4} {th:>10} {verdict:>6}", worst.bias.abs()),
            );
        }
    }
    if failures.is_empty() {
        say(out, format_args!("PASS"));
        Ok(())
    } else {
        Err(CliError::Certification(failures.join("; ")))
    }
}

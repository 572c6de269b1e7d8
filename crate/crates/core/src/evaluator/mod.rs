//! Importance-sampling log-likelihood estimates under arbitrary encoder
//! input subsets, and an exactly solvable linear-Gaussian model to check them.

mod oracle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{gaussian_ll, rsample, std_normal_ll, DiagGaussian};
use crate::model::{cross_modal_infer, Batch, Likelihood, MhvaeParams, ModelError, Pass};
use crate::mrd::{Mask, MaskError};
use crate::numerics::{Graph, NormMode, NumericsError, Scalar, Tensor, Var};
use crate::rng::{substream, Stream};

pub use oracle::{build_linear_gaussian_oracle, LinearGaussianOracle, OracleDims};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Config(String),
    #[error("non-finite log-weight for datapoint {datapoint} at sample {sample}")]
    NonFinite { datapoint: usize, sample: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NumericsError> for EvalError {
    fn from(e: NumericsError) -> Self {
        EvalError::Model(e.into())
    }
}

impl From<MaskError> for EvalError {
    fn from(e: MaskError) -> Self {
        EvalError::Model(e.into())
    }
}

/// Importance samples, encoder inputs `S`, scored modalities `O`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub input_subset: Vec<usize>,
    pub observed: Vec<usize>,
    /// Samples evaluated per graph.
    pub inner_batch: usize,
}

/// Dataset-mean log-likelihood in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LLEstimate {
    pub value: f64,
    pub std_error: f64,
    pub k: usize,
}

impl LLEstimate {
    pub fn from_values(values: &[f64], k: usize) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        LLEstimate {
            value: mean,
            std_error,
            k,
        }
    }
}

/// `log Σ exp(v) − log n`, computed with a max shift.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn validate<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    subset: &[usize],
    observed: &[&[usize]],
    k: usize,
) -> Result<(), EvalError> {
    let n = params.n_modalities();
    if k == 0 {
        return Err(EvalError::Config("K must be at least 1".into()));
    }
    if subset.is_empty() {
        return Err(EvalError::Config("input subset is empty".into()));
    }
    for o in observed {
        if o.is_empty() {
            return Err(EvalError::Config("observed set is empty".into()));
        }
    }
    if let Some(&bad) = subset.iter().chain(observed.iter().flat_map(|o| o.iter())).find(|&&i| i >= n) {
        return Err(EvalError::Model(ModelError::UnknownModality(bad)));
    }
    data.check(&params.config)?;
    Ok(())
}

/// Log-weights of `k` joint proposals for datapoint row `row` of `data`,
/// one vector per observed set. All sets share the same draws.
fn log_weights<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    row: usize,
    subset: &[usize],
    observed: &[&[usize]],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n_mod = params.n_modalities();
    let mask = Mask::subset(n_mod, subset)?;
    let point = data.select(&[row]);

    // Encoder outputs do not depend on the draws.
    let mut pass = Pass::new(params, NormMode::Eval);
    let mut hidden = Vec::with_capacity(n_mod);
    let mut q: Vec<Option<(Tensor<S>, Tensor<S>)>> = vec![None; n_mod];
    for i in 0..n_mod {
        if mask.keep()[i] {
            let x = pass.graph.constant(point.modalities[i].values.clone());
            let e = pass.encode_modality(i, x)?;
            hidden.push(e.h);
            q[i] = Some((
                pass.graph.value(e.q_z.mean).clone(),
                pass.graph.value(e.q_z.log_var).clone(),
            ));
        } else {
            let w = params.config.modalities[i].h_dim;
            hidden.push(pass.graph.constant(Tensor::zeros(&[1, w])));
        }
    }
    let qc = pass.core_posterior(&hidden, std::slice::from_ref(&mask))?;
    let qc = (pass.graph.value(qc.mean).clone(), pass.graph.value(qc.log_var).clone());
    drop(pass);

    let needed: Vec<bool> = (0..n_mod)
        .map(|i| mask.keep()[i] || observed.iter().any(|o| o.contains(&i)))
        .collect();
    let name_keys: Vec<u64> = params.config.modalities.iter().map(|m| fnv1a(&m.name)).collect();
    let zc_dim = params.config.core.zc_dim;
    let mut out = vec![Vec::with_capacity(k); observed.len()];
    let inner = inner.max(1);
    for (c, start) in (0..k).step_by(inner).enumerate() {
        let rows = inner.min(k - start);
        let key = [row as u64, c as u64];
        let mut pass = Pass::new(params, NormMode::Eval);
        let g = &mut pass.graph;
        let rep = |g: &mut Graph<S>, t: &(Tensor<S>, Tensor<S>)| -> Result<DiagGaussian, ModelError> {
            let m = g.constant(t.0.repeat_rows(rows));
            let lv = g.constant(t.1.repeat_rows(rows));
            Ok(DiagGaussian::new(g, m, lv)?)
        };
        let qcd = rep(g, &qc)?;
        let eps = Tensor::randn(&[rows, zc_dim], &mut substream(seed, Stream::Eval, &[key[0], key[1], 0]));
        let eps = g.constant(eps);
        let zc = rsample(g, &qcd, eps)?;
        let lp = std_normal_ll(g, zc)?;
        let lq = gaussian_ll(g, &qcd, zc)?;
        let mut base = g.sub(lp, lq)?;
        let trunk = pass.prior_trunk(zc)?;
        let mut z: Vec<Option<Var>> = vec![None; n_mod];
        for i in 0..n_mod {
            if !needed[i] {
                continue;
            }
            let prior = pass.prior_head(trunk, i)?;
            let g = &mut pass.graph;
            let zd = params.config.modalities[i].z_dim;
            let mut r = substream(seed, Stream::Eval, &[key[0], key[1], 1, name_keys[i]]);
            let eps = g.constant(Tensor::randn(&[rows, zd], &mut r));
            match &q[i] {
                Some(t) => {
                    let qi = rep(g, t)?;
                    let zi = rsample(g, &qi, eps)?;
                    let a = gaussian_ll(g, &prior, zi)?;
                    let b = gaussian_ll(g, &qi, zi)?;
                    let d = g.sub(a, b)?;
                    base = g.add(base, d)?;
                    z[i] = Some(zi);
                }
                None => z[i] = Some(rsample(g, &prior, eps)?),
            }
        }
        let mut ll: Vec<Option<Var>> = vec![None; n_mod];
        for i in 0..n_mod {
            if observed.iter().any(|o| o.contains(&i)) {
                let out = pass.decode_modality(i, z[i].expect("sampled"))?;
                let x = point.modalities[i].repeat(rows);
                ll[i] = Some(pass.log_likelihood(i, out, &x)?);
            }
        }
        let g = &pass.graph;
        let base_v = g.value(base).to_f64_vec();
        for (o, dst) in observed.iter().zip(out.iter_mut()) {
            let mut w = base_v.clone();
            for &i in o.iter() {
                for (a, b) in w.iter_mut().zip(g.value(ll[i].expect("scored")).to_f64_vec()) {
                    *a += b;
                }
            }
            if let Some(pos) = w.iter().position(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite {
                    datapoint: row,
                    sample: start + pos,
                });
            }
            dst.extend(w);
        }
    }
    Ok(out)
}

/// Importance-sampling estimate of `log p(x_O)` for datapoint `row`, with
/// the core encoder fed exactly the modalities in `S`.
pub fn estimate_ll<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    row: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    validate(params, data, &cfg.input_subset, &[&cfg.observed], cfg.k)?;
    let w = log_weights(params, data, row, &cfg.input_subset, &[&cfg.observed], cfg.k, cfg.inner_batch, seed)?;
    Ok(log_mean_exp(&w[0]))
}

/// Per-datapoint estimates for several observed sets sharing one set of
/// draws per datapoint. Parallel over datapoints; results do not depend on
/// the number of workers.
pub fn estimate_many<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    subset: &[usize],
    observed: &[&[usize]],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EvalError> {
    validate(params, data, subset, observed, k)?;
    let per_point: Vec<Vec<f64>> = (0..data.rows())
        .into_par_iter()
        .map(|r| {
            let w = log_weights(params, data, r, subset, observed, k, inner, seed)?;
            Ok(w.iter().map(|v| log_mean_exp(v)).collect())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok((0..observed.len())
        .map(|o| per_point.iter().map(|p| p[o]).collect())
        .collect())
}

/// `log p(x_1, ..., x_N)` with encoder inputs `S`.
pub fn estimate_joint<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    subset: &[usize],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<LLEstimate, EvalError> {
    let all: Vec<usize> = (0..params.n_modalities()).collect();
    let v = estimate_many(params, data, subset, &[&all], k, inner, seed)?;
    Ok(LLEstimate::from_values(&v[0], k))
}

/// `log p(x_j)` with encoder inputs `S`.
pub fn estimate_marginal<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    j: usize,
    subset: &[usize],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<LLEstimate, EvalError> {
    let v = estimate_many(params, data, subset, &[&[j]], k, inner, seed)?;
    Ok(LLEstimate::from_values(&v[0], k))
}

/// Per-datapoint `(conditional, joint, marginal)` values for `log p(x_j | x_G)`
/// computed as `log p(x_G, x_j) − log p(x_G)` on shared draws with `S = G`.
pub fn conditional_parts<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    j: usize,
    given: &[usize],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), EvalError> {
    if given.contains(&j) {
        return Err(EvalError::Config(format!("target {j} is also conditioned on")));
    }
    let mut with_j = given.to_vec();
    with_j.push(j);
    with_j.sort_unstable();
    let v = estimate_many(params, data, given, &[&with_j, given], k, inner, seed)?;
    let cond = v[0].iter().zip(&v[1]).map(|(a, b)| a - b).collect();
    let mut it = v.into_iter();
    let joint = it.next().expect("two sets");
    let marg = it.next().expect("two sets");
    Ok((cond, joint, marg))
}

/// `log p(x_j | x_G)` with encoder inputs `G`.
pub fn estimate_conditional<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    j: usize,
    given: &[usize],
    k: usize,
    inner: usize,
    seed: u64,
) -> Result<LLEstimate, EvalError> {
    let (cond, _, _) = conditional_parts(params, data, j, given, k, inner, seed)?;
    Ok(LLEstimate::from_values(&cond, k))
}

/// Fraction of rows whose most likely class of categorical modality `target`,
/// inferred from the modalities in `given` with every latent at its mean,
/// equals the true class.
pub fn cross_modal_accuracy<S: Scalar>(
    params: &MhvaeParams<S>,
    data: &Batch<S>,
    target: usize,
    given: &[usize],
    chunk: usize,
) -> Result<f64, EvalError> {
    if !matches!(
        params.config.modalities.get(target).map(|m| m.likelihood),
        Some(Likelihood::Categorical { .. })
    ) {
        return Err(EvalError::Config(format!("modality {target} is not categorical")));
    }
    data.check(&params.config)?;
    let truth = data.modalities[target].classes.as_ref().expect("checked");
    let n = data.rows();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for rows in idx.chunks(chunk.max(1)) {
        let rec = cross_modal_infer(params, &data.select(rows), given, None)?;
        let pred = rec[target].classes.as_ref().expect("categorical");
        correct += rows.iter().zip(pred).filter(|(&r, &p)| truth[r] == p).count();
    }
    Ok(correct as f64 / n as f64)
}

//! The dropout-aware hierarchical ELBO and its KL warm-up schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag, kl_std_normal, rsample};
use crate::model::{Batch, MhvaeParams, ModelError, Pass};
use crate::mrd::Mask;
use crate::numerics::{
    finite_diff_check, GradCheckConfig, GradCheckReport, Graph, NormMode, ParamStore, RunningStats,
    Scalar, Tensor, Var,
};

/// Linear KL ramps: modality KLs over `modality_epochs`, the core KL over
/// `core_epochs`. Zero disables the ramp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSchedule {
    pub modality_epochs: usize,
    pub core_epochs: usize,
}

/// `min(1, epoch / u)`, and 1 when `u == 0`.
pub fn warmup_factor(epoch: usize, u: usize) -> f64 {
    if u == 0 {
        1.0
    } else {
        (epoch as f64 / u as f64).min(1.0)
    }
}

/// Warm-up multipliers applied on top of the configured KL weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlScale {
    pub modality: f64,
    pub core: f64,
}

impl KlScale {
    pub fn at_epoch(epoch: usize, schedule: &WarmupSchedule) -> Self {
        KlScale {
            modality: warmup_factor(epoch, schedule.modality_epochs),
            core: warmup_factor(epoch, schedule.core_epochs),
        }
    }

    pub fn saturated() -> Self {
        KlScale {
            modality: 1.0,
            core: 1.0,
        }
    }
}

/// Batch-averaged ELBO terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `E[log p(x_i | z_i)]` per modality.
    pub recon: Vec<f64>,
    pub kl_modality: Vec<f64>,
    pub kl_core: f64,
    /// Weighted, negated ELBO that training minimizes.
    pub weighted_total: f64,
}

impl LossBreakdown {
    /// Example-weighted mean of several batch breakdowns.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> Option<LossBreakdown> {
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let first = &parts.first()?.0;
        let mut acc = LossBreakdown {
            recon: vec![0.0; first.recon.len()],
            kl_modality: vec![0.0; first.kl_modality.len()],
            kl_core: 0.0,
            weighted_total: 0.0,
        };
        for (p, n) in parts {
            let w = *n as f64 / total as f64;
            for (a, v) in acc.recon.iter_mut().zip(&p.recon) {
                *a += w * v;
            }
            for (a, v) in acc.kl_modality.iter_mut().zip(&p.kl_modality) {
                *a += w * v;
            }
            acc.kl_core += w * p.kl_core;
            acc.weighted_total += w * p.weighted_total;
        }
        Some(acc)
    }
}

/// Standard-normal draws for every reparameterized sample of one batch.
#[derive(Clone, Debug)]
pub struct ElboNoise<S> {
    pub modality: Vec<Tensor<S>>,
    pub core: Tensor<S>,
}

impl<S: Scalar> ElboNoise<S> {
    pub fn sample<R: Rng + ?Sized>(params: &MhvaeParams<S>, rows: usize, rng: &mut R) -> Self {
        let modality = params
            .config
            .modalities
            .iter()
            .map(|m| Tensor::randn(&[rows, m.z_dim], rng))
            .collect();
        let core = Tensor::randn(&[rows, params.config.core.zc_dim], rng);
        ElboNoise { modality, core }
    }

    pub fn cast<T: Scalar>(&self) -> ElboNoise<T> {
        ElboNoise {
            modality: self.modality.iter().map(|t| t.cast()).collect(),
            core: self.core.cast(),
        }
    }
}

/// A recorded ELBO evaluation.
pub struct ElboOutput<S> {
    pub graph: Graph<S>,
    /// Scalar `weighted_total`.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Unweighted single-sample ELBO of each datapoint.
    pub per_datapoint: Vec<f64>,
    pub bn_updates: Vec<(usize, RunningStats<S>)>,
}

/// ELBO with explicit noise, against the values in `store`.
pub fn elbo_with_store<S: Scalar>(
    params: &MhvaeParams<S>,
    store: &ParamStore<S>,
    batch: &Batch<S>,
    masks: &[Mask],
    scale: KlScale,
    noise: &ElboNoise<S>,
    mode: NormMode,
) -> Result<ElboOutput<S>, ModelError> {
    let cfg = &params.config;
    batch.check(cfg)?;
    let b = batch.rows();
    let n = cfg.n_modalities();
    if masks.len() != b {
        return Err(ModelError::Input(format!("{} masks for {b} datapoints", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != n) {
        return Err(ModelError::Input(format!(
            "mask of length {} for {n} modalities",
            m.len()
        )));
    }
    if noise.modality.len() != n {
        return Err(ModelError::Input("noise does not match the modalities".into()));
    }

    let mut pass = Pass::with_store(params, store, mode);
    let mut hidden = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut recon = Vec::with_capacity(n);
    for i in 0..n {
        let x = pass.graph.constant(batch.modalities[i].values.clone());
        let enc = pass.encode_modality(i, x)?;
        let eps = pass.graph.constant(noise.modality[i].clone());
        let z = rsample(&mut pass.graph, &enc.q_z, eps)?;
        let out = pass.decode_modality(i, z)?;
        recon.push(pass.log_likelihood(i, out, &batch.modalities[i])?);
        hidden.push(enc.h);
        q.push(enc.q_z);
    }
    let qc = pass.core_posterior(&hidden, masks)?;
    let kl_core = kl_std_normal(&mut pass.graph, &qc)?;
    let eps_c = pass.graph.constant(noise.core.clone());
    let zc = rsample(&mut pass.graph, &qc, eps_c)?;
    let trunk = pass.prior_trunk(zc)?;
    let mut kl_mod = Vec::with_capacity(n);
    for (i, qi) in q.iter().enumerate() {
        let p = pass.prior_head(trunk, i)?;
        kl_mod.push(kl_diag(&mut pass.graph, qi, &p)?);
    }

    let g = &mut pass.graph;
    let mut per_datapoint = g.value(kl_core).to_f64_vec().iter().map(|v| -v).collect::<Vec<_>>();
    for (&r, &k) in recon.iter().zip(&kl_mod) {
        let (rv, kv) = (g.value(r).to_f64_vec(), g.value(k).to_f64_vec());
        for (e, (a, c)) in per_datapoint.iter_mut().zip(rv.iter().zip(&kv)) {
            *e += a - c;
        }
    }

    let mut total: Option<Var> = None;
    let mut accumulate = |g: &mut Graph<S>, term: Var, w: f64| -> Result<(), ModelError> {
        let m = g.mean(term);
        let t = g.scale(m, w);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
        Ok(())
    };
    let mut breakdown = LossBreakdown {
        recon: Vec::with_capacity(n),
        kl_modality: Vec::with_capacity(n),
        kl_core: g.value(kl_core).to_f64_vec().iter().sum::<f64>() / b as f64,
        weighted_total: 0.0,
    };
    for (i, spec) in cfg.modalities.iter().enumerate() {
        accumulate(g, recon[i], -spec.recon_weight)?;
        accumulate(g, kl_mod[i], scale.modality * spec.kl_weight)?;
        breakdown
            .recon
            .push(g.value(recon[i]).to_f64_vec().iter().sum::<f64>() / b as f64);
        breakdown
            .kl_modality
            .push(g.value(kl_mod[i]).to_f64_vec().iter().sum::<f64>() / b as f64);
    }
    accumulate(g, kl_core, scale.core * cfg.core.kl_weight)?;
    let loss = total.expect("at least one modality");
    breakdown.weighted_total = g.value(loss).item().to_f64().unwrap_or(f64::NAN);

    let (graph, bn_updates) = pass.finish();
    Ok(ElboOutput {
        graph,
        loss,
        breakdown,
        per_datapoint,
        bn_updates,
    })
}

/// ELBO of one batch at `epoch`, drawing the reparameterization noise from `rng`.
pub fn elbo<S: Scalar, R: Rng + ?Sized>(
    params: &MhvaeParams<S>,
    batch: &Batch<S>,
    masks: &[Mask],
    epoch: usize,
    schedule: &WarmupSchedule,
    rng: &mut R,
    mode: NormMode,
) -> Result<ElboOutput<S>, ModelError> {
    let noise = ElboNoise::sample(params, batch.rows(), rng);
    elbo_with_store(
        params,
        &params.store,
        batch,
        masks,
        KlScale::at_epoch(epoch, schedule),
        &noise,
        mode,
    )
}

/// Finite-difference certification of the full train-mode ELBO gradient in
/// 64-bit arithmetic with frozen noise and masks.
pub fn certify_gradients(
    params: &MhvaeParams<f64>,
    batch: &Batch<f64>,
    masks: &[Mask],
    noise: &ElboNoise<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    let mut store = params.store.clone();
    finite_diff_check(
        |st: &ParamStore<f64>| {
            let out = elbo_with_store(
                params,
                st,
                batch,
                masks,
                KlScale::saturated(),
                noise,
                NormMode::Train,
            )?;
            Ok((out.graph, out.loss))
        },
        &mut store,
        cfg,
    )
}

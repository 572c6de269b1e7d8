//! Network graph: modality encoders and decoders, the core encoder,
//! conditional priors, generation and cross-modality inference.

mod params;
mod pass;
mod spec;

use rand::RngCore;

use crate::distributions::{rsample, DiagGaussian};
use crate::mrd::{Mask, MaskError};
use crate::numerics::{NormMode, NumericsError, Scalar, Tensor, Var};

pub use params::{MhvaeParams, CONV_KERNEL, CONV_PADDING, CONV_STRIDE};
pub use pass::{EncodeOut, Pass};
pub use spec::{
    Activation, CoreSpec, Likelihood, ModalitySpec, ModelConfig, NetKind, PosteriorKind,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown modality index {0}")]
    UnknownModality(usize),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Rows of one modality: flattened values plus class indices for
/// categorical modalities (where `values` holds the one-hot encoding).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch<S> {
    pub values: Tensor<S>,
    pub classes: Option<Vec<usize>>,
}

impl<S: Scalar> ModalityBatch<S> {
    pub fn dense(values: Tensor<S>) -> Self {
        ModalityBatch {
            values,
            classes: None,
        }
    }

    pub fn one_hot(classes: Vec<usize>, n_classes: usize) -> Self {
        let mut values = Tensor::zeros(&[classes.len(), n_classes]);
        for (r, &c) in classes.iter().enumerate() {
            values.data_mut()[r * n_classes + c] = S::one();
        }
        ModalityBatch {
            values,
            classes: Some(classes),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        ModalityBatch {
            values: self.values.select_rows(rows),
            classes: self
                .classes
                .as_ref()
                .map(|c| rows.iter().map(|&r| c[r]).collect()),
        }
    }

    pub fn repeat(&self, times: usize) -> Self {
        ModalityBatch {
            values: self.values.repeat_rows(times),
            classes: self
                .classes
                .as_ref()
                .map(|c| c.iter().flat_map(|&k| std::iter::repeat_n(k, times)).collect()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModalityBatch<T> {
        ModalityBatch {
            values: self.values.cast(),
            classes: self.classes.clone(),
        }
    }
}

/// One row-aligned batch across all modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub modalities: Vec<ModalityBatch<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn rows(&self) -> usize {
        self.modalities.first().map_or(0, |m| m.rows())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Batch {
            modalities: self.modalities.iter().map(|m| m.select(rows)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Batch<T> {
        Batch {
            modalities: self.modalities.iter().map(|m| m.cast()).collect(),
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.modalities.len() != config.n_modalities() {
            return Err(ModelError::Input(format!(
                "batch has {} modalities, model has {}",
                self.modalities.len(),
                config.n_modalities()
            )));
        }
        let b = self.rows();
        if b == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        for (m, spec) in self.modalities.iter().zip(&config.modalities) {
            if m.rows() != b || m.values.row_len() != spec.input_len() {
                return Err(ModelError::Input(format!(
                    "modality {} has shape {:?}, expected {b}×{}",
                    spec.name,
                    m.values.shape(),
                    spec.input_len()
                )));
            }
            if matches!(spec.likelihood, Likelihood::Categorical { .. })
                && m.classes.as_ref().map(Vec::len) != Some(b)
            {
                return Err(ModelError::Input(format!(
                    "modality {} is categorical but lacks class indices",
                    spec.name
                )));
            }
        }
        Ok(())
    }
}

/// Per-modality outputs of generation or cross-modality inference.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Pixel probabilities, class probabilities or Gaussian means, `B×D`.
    pub means: Tensor<f64>,
    /// Most likely class per row, for categorical modalities.
    pub classes: Option<Vec<usize>>,
}

fn to_reconstruction<S: Scalar>(
    pass: &mut Pass<'_, S>,
    i: usize,
    out: Var,
) -> Result<Reconstruction, ModelError> {
    let likelihood = pass.params().config.modalities[i].likelihood;
    let g = &mut pass.graph;
    Ok(match likelihood {
        Likelihood::Bernoulli => {
            let p = g.sigmoid(out)?;
            Reconstruction {
                means: g.value(p).cast(),
                classes: None,
            }
        }
        Likelihood::Categorical { .. } => {
            let ls = g.log_softmax(out)?;
            let p = g.exp(ls)?;
            let t: Tensor<f64> = g.value(p).cast();
            let classes = t.argmax_rows();
            Reconstruction {
                means: t,
                classes: Some(classes),
            }
        }
        Likelihood::Gaussian { .. } => Reconstruction {
            means: g.value(out).cast(),
            classes: None,
        },
    })
}

/// A draw from `q`, or its mean when no generator is supplied.
fn draw<S: Scalar>(
    pass: &mut Pass<'_, S>,
    q: &DiagGaussian,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    match rng {
        None => Ok(q.mean),
        Some(r) => {
            let shape = pass.graph.shape(q.mean).to_vec();
            let e = pass.graph.constant(Tensor::randn(&shape, &mut **r));
            Ok(rsample(&mut pass.graph, q, e)?)
        }
    }
}

/// `n` joint samples: `z^c ~ N(0, I)`, `z_i ~ p(z_i | z^c)`, then the
/// likelihood means of every modality.
pub fn generate_from_prior<S: Scalar>(
    params: &MhvaeParams<S>,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Reconstruction>, ModelError> {
    if n == 0 {
        return Err(ModelError::Input("cannot generate zero samples".into()));
    }
    let mut pass = Pass::new(params, NormMode::Eval);
    let zc_dim = params.config.core.zc_dim;
    let zc = pass.graph.constant(Tensor::randn(&[n, zc_dim], rng));
    let trunk = pass.prior_trunk(zc)?;
    let mut rng = Some(rng);
    let mut out = Vec::with_capacity(params.n_modalities());
    for i in 0..params.n_modalities() {
        let p = pass.prior_head(trunk, i)?;
        let z = draw(&mut pass, &p, &mut rng)?;
        let logits = pass.decode_modality(i, z)?;
        out.push(to_reconstruction(&mut pass, i, logits)?);
    }
    Ok(out)
}

/// Reconstructs every modality from the ones listed in `available`. Missing
/// modalities are zeroed before the core encoder and generated through
/// `p(z_j | z^c)`; available ones are decoded from `q(z_i | x_i)`. With no
/// generator every latent is replaced by its mean.
pub fn cross_modal_infer<S: Scalar>(
    params: &MhvaeParams<S>,
    batch: &Batch<S>,
    available: &[usize],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Reconstruction>, ModelError> {
    let n_mod = params.n_modalities();
    if available.is_empty() {
        return Err(ModelError::Input("no available modality".into()));
    }
    if let Some(&bad) = available.iter().find(|&&i| i >= n_mod) {
        return Err(ModelError::UnknownModality(bad));
    }
    let b = batch.rows();
    if batch.modalities.len() != n_mod {
        return Err(ModelError::Input(format!(
            "batch has {} modalities, model has {n_mod}",
            batch.modalities.len()
        )));
    }
    let mask = Mask::subset(n_mod, available)?;
    let mut pass = Pass::new(params, NormMode::Eval);
    let mut hidden = Vec::with_capacity(n_mod);
    let mut q = Vec::with_capacity(n_mod);
    for i in 0..n_mod {
        if mask.keep()[i] {
            let x = pass.graph.constant(batch.modalities[i].values.clone());
            let enc = pass.encode_modality(i, x)?;
            hidden.push(enc.h);
            q.push(Some(enc.q_z));
        } else {
            let h_dim = params.config.modalities[i].h_dim;
            hidden.push(pass.graph.constant(Tensor::zeros(&[b, h_dim])));
            q.push(None);
        }
    }
    let masks = vec![mask; b];
    let qc = pass.core_posterior(&hidden, &masks)?;
    let zc = draw(&mut pass, &qc, &mut rng)?;
    let trunk = pass.prior_trunk(zc)?;
    let mut out = Vec::with_capacity(n_mod);
    for (i, qi) in q.iter().enumerate() {
        let dist = match qi {
            Some(d) => *d,
            None => pass.prior_head(trunk, i)?,
        };
        let z = draw(&mut pass, &dist, &mut rng)?;
        let logits = pass.decode_modality(i, z)?;
        out.push(to_reconstruction(&mut pass, i, logits)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

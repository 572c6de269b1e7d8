use crate::distributions::{
    bernoulli_ll, categorical_ll, gaussian_ll, BernoulliParams, CategoricalParams, DiagGaussian,
};
use crate::mrd::{apply_mask, poe_combine_gated, Mask};
use crate::numerics::{Graph, NormMode, ParamStore, RunningStats, Scalar, Tensor, Var};

use super::params::{Head, Layer, Linear, MhvaeParams, CONV_PADDING, CONV_STRIDE};
use super::spec::{Activation, Likelihood, PosteriorKind};
use super::{ModalityBatch, ModelError};

/// Output of a modality encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncodeOut {
    /// Final trunk activation, fed to the core encoder.
    pub h: Var,
    pub q_z: DiagGaussian,
}

/// One forward computation over the model, recorded on a fresh graph.
pub struct Pass<'p, S: Scalar> {
    pub graph: Graph<S>,
    params: &'p MhvaeParams<S>,
    store: &'p ParamStore<S>,
    mode: NormMode,
    bn_updates: Vec<(usize, RunningStats<S>)>,
}

impl<'p, S: Scalar> Pass<'p, S> {
    pub fn new(params: &'p MhvaeParams<S>, mode: NormMode) -> Self {
        Self::with_store(params, &params.store, mode)
    }

    /// Uses the layout and running statistics of `params` with the values in
    /// `store`, which must have the same parameter order.
    pub fn with_store(params: &'p MhvaeParams<S>, store: &'p ParamStore<S>, mode: NormMode) -> Self {
        Pass {
            graph: Graph::new(),
            params,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p MhvaeParams<S> {
        self.params
    }

    /// The graph and the running statistics observed by train-mode batch norms.
    pub fn finish(self) -> (Graph<S>, Vec<(usize, RunningStats<S>)>) {
        (self.graph, self.bn_updates)
    }

    fn check_modality(&self, i: usize) -> Result<(), ModelError> {
        if i >= self.params.n_modalities() {
            return Err(ModelError::UnknownModality(i));
        }
        Ok(())
    }

    fn linear(&mut self, l: Linear, x: Var) -> Result<Var, ModelError> {
        let w = self.graph.param(self.store, l.w);
        let b = self.graph.param(self.store, l.b);
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_bias(y, b)?)
    }

    fn head(&mut self, h: Head, x: Var) -> Result<DiagGaussian, ModelError> {
        let mean = self.linear(h.mean, x)?;
        let log_var = self.linear(h.log_var, x)?;
        Ok(DiagGaussian::new(&mut self.graph, mean, log_var)?)
    }

    fn activate(&mut self, a: Activation, x: Var) -> Result<Var, ModelError> {
        Ok(match a {
            Activation::LeakyRelu { slope } => self.graph.leaky_relu(x, slope)?,
            Activation::Swish => self.graph.swish(x)?,
            Activation::Identity => x,
        })
    }

    fn run(&mut self, layers: &[Layer], mut x: Var) -> Result<Var, ModelError> {
        let store = self.store;
        for layer in layers {
            x = match layer {
                Layer::Linear { w, b } => self.linear(Linear { w: *w, b: *b }, x)?,
                Layer::BatchNorm { gamma, beta, stats } => {
                    let gv = self.graph.param(store, *gamma);
                    let bv = self.graph.param(store, *beta);
                    let running = &self.params.bn_stats[*stats];
                    let (y, upd) = self.graph.batchnorm(x, gv, bv, running, self.mode)?;
                    if let Some(u) = upd {
                        self.bn_updates.push((*stats, u));
                    }
                    y
                }
                Layer::Act(a) => self.activate(*a, x)?,
                Layer::Conv { w, b } => {
                    let wv = self.graph.param(store, *w);
                    let bv = self.graph.param(store, *b);
                    self.graph.conv2d(x, wv, Some(bv), CONV_STRIDE, CONV_PADDING)?
                }
                Layer::ConvT { w, b } => {
                    let wv = self.graph.param(store, *w);
                    let bv = self.graph.param(store, *b);
                    self.graph
                        .conv_transpose2d(x, wv, Some(bv), CONV_STRIDE, CONV_PADDING)?
                }
                Layer::Reshape(row) => {
                    let mut shape = vec![self.graph.shape(x)[0]];
                    shape.extend_from_slice(row);
                    self.graph.reshape(x, &shape)?
                }
            };
        }
        Ok(x)
    }

    /// `h_i` and `q(z_i | x_i)` for a `B×input_len` batch of modality `i`.
    pub fn encode_modality(&mut self, i: usize, x: Var) -> Result<EncodeOut, ModelError> {
        self.check_modality(i)?;
        let spec = &self.params.config.modalities[i];
        let shape = self.graph.shape(x);
        if shape.len() != 2 || shape[1] != spec.input_len() {
            return Err(ModelError::Input(format!(
                "modality {} expects rows of {} values, got shape {shape:?}",
                spec.name,
                spec.input_len()
            )));
        }
        let m = &self.params.layout.modalities[i];
        let h = self.run(&m.encoder, x)?;
        let q_z = self.head(m.posterior, h)?;
        Ok(EncodeOut { h, q_z })
    }

    /// `q(z^c | h^d)` from the already masked, per-modality representations.
    pub fn encode_core(&mut self, h_masked: &[Var]) -> Result<DiagGaussian, ModelError> {
        let layout = &self.params.layout;
        let head = layout.core_head.ok_or_else(|| {
            ModelError::Config("encode_core needs the dropout posterior".into())
        })?;
        if h_masked.len() != self.params.n_modalities() {
            return Err(ModelError::Input(format!(
                "{} representations for {} modalities",
                h_masked.len(),
                self.params.n_modalities()
            )));
        }
        let h = if h_masked.len() == 1 {
            h_masked[0]
        } else {
            self.graph.concat(h_masked, 1)?
        };
        let t = self.run(&layout.core_trunk, h)?;
        self.head(head, t)
    }

    /// `q(z^c | ·)` for per-datapoint masks: dropout then the core encoder,
    /// or a gated product of experts.
    pub fn core_posterior(&mut self, hidden: &[Var], masks: &[Mask]) -> Result<DiagGaussian, ModelError> {
        match self.params.config.posterior {
            PosteriorKind::Mrd => {
                let masked = apply_mask(&mut self.graph, hidden, masks)?;
                self.encode_core(&masked)
            }
            PosteriorKind::Poe => {
                let b = masks.len();
                let zc = self.params.config.core.zc_dim;
                let mut experts = Vec::with_capacity(hidden.len());
                let mut gates = Vec::with_capacity(hidden.len());
                for (i, &h) in hidden.iter().enumerate() {
                    let (trunk, head) = self.params.layout.modalities[i]
                        .expert
                        .clone()
                        .ok_or_else(|| ModelError::Config("missing expert network".into()))?;
                    let t = self.run(&trunk, h)?;
                    experts.push(self.head(head, t)?);
                    if masks.iter().all(|m| m.keep()[i]) {
                        gates.push(None);
                    } else {
                        let mut gate = Tensor::<S>::zeros(&[b, zc]);
                        for (r, m) in masks.iter().enumerate() {
                            if m.keep()[i] {
                                gate.data_mut()[r * zc..(r + 1) * zc].fill(S::one());
                            }
                        }
                        gates.push(Some(self.graph.constant(gate)));
                    }
                }
                Ok(poe_combine_gated(&mut self.graph, &experts, &gates, &[b, zc])?)
            }
        }
    }

    /// Shared trunk of the conditional priors.
    pub fn prior_trunk(&mut self, zc: Var) -> Result<Var, ModelError> {
        let zc_dim = self.params.config.core.zc_dim;
        if self.graph.shape(zc).get(1) != Some(&zc_dim) {
            return Err(ModelError::Input(format!(
                "core latent must have {zc_dim} columns, got {:?}",
                self.graph.shape(zc)
            )));
        }
        let layers = &self.params.layout.prior_trunk;
        self.run(layers, zc)
    }

    pub fn prior_head(&mut self, trunk: Var, i: usize) -> Result<DiagGaussian, ModelError> {
        self.check_modality(i)?;
        let head = self.params.layout.modalities[i].prior;
        self.head(head, trunk)
    }

    /// `p(z_i | z^c)`.
    pub fn prior_map(&mut self, zc: Var, i: usize) -> Result<DiagGaussian, ModelError> {
        self.check_modality(i)?;
        let t = self.prior_trunk(zc)?;
        self.prior_head(t, i)
    }

    /// Likelihood parameters of modality `i` as a `B×input_len` tensor:
    /// logits for Bernoulli and categorical, the mean for Gaussian.
    pub fn decode_modality(&mut self, i: usize, z: Var) -> Result<Var, ModelError> {
        self.check_modality(i)?;
        let z_dim = self.params.config.modalities[i].z_dim;
        if self.graph.shape(z).get(1) != Some(&z_dim) {
            return Err(ModelError::Input(format!(
                "modality latent must have {z_dim} columns, got {:?}",
                self.graph.shape(z)
            )));
        }
        let layers = &self.params.layout.modalities[i].decoder;
        self.run(layers, z)
    }

    /// `log p(x_i | ·)` per row for decoder output `out`.
    pub fn log_likelihood(
        &mut self,
        i: usize,
        out: Var,
        x: &ModalityBatch<S>,
    ) -> Result<Var, ModelError> {
        self.check_modality(i)?;
        let g = &mut self.graph;
        Ok(match self.params.config.modalities[i].likelihood {
            Likelihood::Bernoulli => {
                let xv = g.constant(x.values.clone());
                bernoulli_ll(g, &BernoulliParams { logits: out }, xv)?
            }
            Likelihood::Categorical { .. } => {
                let classes = x.classes.as_ref().ok_or_else(|| {
                    ModelError::Input("categorical modality without class indices".into())
                })?;
                categorical_ll(g, &CategoricalParams { logits: out }, classes)?
            }
            Likelihood::Gaussian { log_var } => {
                let shape = g.shape(out).to_vec();
                let lv = g.constant(Tensor::full(&shape, S::from_f64_lossy(log_var)));
                let p = DiagGaussian::new(g, out, lv)?;
                let xv = g.constant(x.values.clone());
                gaussian_ll(g, &p, xv)?
            }
        })
    }
}

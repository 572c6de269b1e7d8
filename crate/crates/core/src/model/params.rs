use rand::Rng;

use crate::numerics::{ParamId, ParamStore, RunningStats, Scalar, Tensor};
use crate::rng::{substream, Stream};

use super::spec::{Activation, ModelConfig, ModalitySpec, NetKind, PosteriorKind};
use super::ModelError;

/// Conv kernel, stride and padding of every (transposed) convolution.
pub const CONV_KERNEL: usize = 4;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PADDING: usize = 1;

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Linear { w: ParamId, b: ParamId },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
    Act(Activation),
    Conv { w: ParamId, b: ParamId },
    ConvT { w: ParamId, b: ParamId },
    /// Per-row shape after the batch axis.
    Reshape(Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Mean and log-variance heads over a shared trunk output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Head {
    pub mean: Linear,
    pub log_var: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct ModalityLayout {
    pub encoder: Vec<Layer>,
    pub posterior: Head,
    pub prior: Head,
    pub decoder: Vec<Layer>,
    /// Core expert used by the product-of-experts posterior.
    pub expert: Option<(Vec<Layer>, Head)>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub modalities: Vec<ModalityLayout>,
    /// Empty under the product-of-experts posterior.
    pub core_trunk: Vec<Layer>,
    pub core_head: Option<Head>,
    pub prior_trunk: Vec<Layer>,
}

/// Value source while building a layout.
enum Fill<'a> {
    Zeros,
    Random(&'a mut rand_chacha::ChaCha8Rng),
}

struct Builder<'a, S: Scalar> {
    store: ParamStore<S>,
    bn: Vec<RunningStats<S>>,
    fill: Fill<'a>,
}

impl<S: Scalar> Builder<'_, S> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId, ModelError> {
        let t = match &mut self.fill {
            Fill::Zeros => Tensor::zeros(shape),
            Fill::Random(rng) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_f64(shape, &v)?
            }
        };
        Ok(self.store.insert(name, t)?)
    }

    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, ModelError> {
        Ok(self.store.insert(name, Tensor::zeros(shape))?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear, ModelError> {
        let w = self.weight(&format!("{name}.w"), &[fan_in, fan_out], fan_in)?;
        let b = self.bias(&format!("{name}.b"), &[1, fan_out])?;
        Ok(Linear { w, b })
    }

    fn head(&mut self, name: &str, fan_in: usize, dim: usize) -> Result<Head, ModelError> {
        Ok(Head {
            mean: self.linear(&format!("{name}.mean"), fan_in, dim)?,
            log_var: self.linear(&format!("{name}.log_var"), fan_in, dim)?,
        })
    }

    fn batch_norm(&mut self, name: &str, width: usize) -> Result<Layer, ModelError> {
        let gamma = match self.fill {
            Fill::Zeros => Tensor::zeros(&[1, width]),
            Fill::Random(_) => Tensor::ones(&[1, width]),
        };
        let gamma = self.store.insert(&format!("{name}.gamma"), gamma)?;
        let beta = self.bias(&format!("{name}.beta"), &[1, width])?;
        self.bn.push(RunningStats {
            mean: Tensor::zeros(&[width]),
            var: Tensor::ones(&[width]),
        });
        Ok(Layer::BatchNorm {
            gamma,
            beta,
            stats: self.bn.len() - 1,
        })
    }

    /// Dense trunk `input → widths...`, each layer followed by optional
    /// batch norm and the activation.
    fn mlp(
        &mut self,
        name: &str,
        input: usize,
        widths: &[usize],
        act: Activation,
        batch_norm: bool,
    ) -> Result<Vec<Layer>, ModelError> {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (k, &w) in widths.iter().enumerate() {
            let l = self.linear(&format!("{name}.{k}"), fan_in, w)?;
            layers.push(Layer::Linear { w: l.w, b: l.b });
            if batch_norm {
                layers.push(self.batch_norm(&format!("{name}.{k}.bn"), w)?);
            }
            layers.push(Layer::Act(act));
            fan_in = w;
        }
        Ok(layers)
    }

    fn encoder(&mut self, spec: &ModalitySpec) -> Result<Vec<Layer>, ModelError> {
        let name = format!("{}.enc", spec.name);
        match spec.kind {
            NetKind::Mlp => self.mlp(
                &name,
                spec.input_len(),
                &spec.hidden_sizes,
                spec.activation,
                spec.batch_norm,
            ),
            NetKind::Conv => {
                let mut layers = vec![Layer::Reshape(spec.input_shape.clone())];
                let (mut c, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
                let k = CONV_KERNEL;
                for (i, &o) in spec.hidden_sizes.iter().enumerate() {
                    let wt = self.weight(&format!("{name}.conv{i}.w"), &[o, c, k, k], c * k * k)?;
                    let b = self.bias(&format!("{name}.conv{i}.b"), &[o])?;
                    layers.push(Layer::Conv { w: wt, b });
                    layers.push(Layer::Act(spec.activation));
                    c = o;
                    h /= CONV_STRIDE;
                    w /= CONV_STRIDE;
                }
                layers.push(Layer::Reshape(vec![c * h * w]));
                layers.extend(self.mlp(&format!("{name}.dense"), c * h * w, &[spec.h_dim], spec.activation, false)?);
                Ok(layers)
            }
        }
    }

    fn decoder(&mut self, spec: &ModalitySpec) -> Result<Vec<Layer>, ModelError> {
        let name = format!("{}.dec", spec.name);
        match spec.kind {
            NetKind::Mlp => {
                let widths: Vec<usize> = spec.hidden_sizes.iter().rev().copied().collect();
                let mut layers = self.mlp(&name, spec.z_dim, &widths, spec.activation, false)?;
                let fan_in = widths.last().copied().unwrap_or(spec.z_dim);
                let out = self.linear(&format!("{name}.out"), fan_in, spec.input_len())?;
                layers.push(Layer::Linear { w: out.w, b: out.b });
                Ok(layers)
            }
            NetKind::Conv => {
                let depth = spec.hidden_sizes.len();
                let f = 1 << depth;
                let c_last = spec.hidden_sizes[depth - 1];
                let (h, w) = (spec.input_shape[1] / f, spec.input_shape[2] / f);
                let mut layers = self.mlp(
                    &format!("{name}.dense"),
                    spec.z_dim,
                    &[spec.h_dim, c_last * h * w],
                    spec.activation,
                    false,
                )?;
                layers.push(Layer::Reshape(vec![c_last, h, w]));
                let k = CONV_KERNEL;
                let mut chans: Vec<usize> = spec.hidden_sizes.iter().rev().copied().collect();
                chans.push(spec.input_shape[0]);
                for i in 0..depth {
                    let (cin, cout) = (chans[i], chans[i + 1]);
                    let wt = self.weight(&format!("{name}.convt{i}.w"), &[cin, cout, k, k], cin * k * k)?;
                    let b = self.bias(&format!("{name}.convt{i}.b"), &[cout])?;
                    layers.push(Layer::ConvT { w: wt, b });
                    if i + 1 < depth {
                        layers.push(Layer::Act(spec.activation));
                    }
                }
                layers.push(Layer::Reshape(vec![spec.input_len()]));
                Ok(layers)
            }
        }
    }
}

fn trunk_width(widths: &[usize], input: usize) -> usize {
    widths.last().copied().unwrap_or(input)
}

fn build<S: Scalar>(config: &ModelConfig, fill: Fill<'_>) -> Result<(Layout, ParamStore<S>, Vec<RunningStats<S>>), ModelError> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        bn: Vec::new(),
        fill,
    };
    let core = &config.core;
    let mut modalities = Vec::with_capacity(config.modalities.len());
    for spec in &config.modalities {
        let encoder = b.encoder(spec)?;
        let posterior = b.head(&format!("{}.q", spec.name), spec.h_dim, spec.z_dim)?;
        modalities.push(ModalityLayout {
            encoder,
            posterior,
            // Filled below once the prior trunk exists.
            prior: posterior,
            decoder: Vec::new(),
            expert: None,
        });
    }
    let h_total: usize = config.modalities.iter().map(|m| m.h_dim).sum();
    let (core_trunk, core_head) = match config.posterior {
        PosteriorKind::Mrd => {
            let trunk = b.mlp("core.enc", h_total, &core.hidden_sizes, core.activation, false)?;
            let head = b.head("core.q", trunk_width(&core.hidden_sizes, h_total), core.zc_dim)?;
            (trunk, Some(head))
        }
        PosteriorKind::Poe => {
            for (spec, m) in config.modalities.iter().zip(modalities.iter_mut()) {
                let name = format!("{}.expert", spec.name);
                let trunk = b.mlp(&name, spec.h_dim, &core.hidden_sizes, core.activation, false)?;
                let head = b.head(&format!("{name}.q"), trunk_width(&core.hidden_sizes, spec.h_dim), core.zc_dim)?;
                m.expert = Some((trunk, head));
            }
            (Vec::new(), None)
        }
    };
    let prior_trunk = b.mlp("core.prior", core.zc_dim, &core.hidden_sizes, core.activation, false)?;
    let pw = trunk_width(&core.hidden_sizes, core.zc_dim);
    for (spec, m) in config.modalities.iter().zip(modalities.iter_mut()) {
        m.prior = b.head(&format!("{}.prior", spec.name), pw, spec.z_dim)?;
        m.decoder = b.decoder(spec)?;
    }
    let layout = Layout {
        modalities,
        core_trunk,
        core_head,
        prior_trunk,
    };
    Ok((layout, b.store, b.bn))
}

/// Every learnable tensor of the model plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct MhvaeParams<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub bn_stats: Vec<RunningStats<S>>,
    pub(crate) layout: Layout,
}

impl<S: Scalar> MhvaeParams<S> {
    /// Fan-in scaled uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases,
    /// unit batch-norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = substream(seed, Stream::Init, &[]);
        let (layout, store, bn_stats) = build(config, Fill::Random(&mut rng))?;
        Ok(MhvaeParams {
            config: config.clone(),
            store,
            bn_stats,
            layout,
        })
    }

    /// Every parameter zero, running statistics at (0, 1).
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        let (layout, store, bn_stats) = build(config, Fill::Zeros)?;
        Ok(MhvaeParams {
            config: config.clone(),
            store,
            bn_stats,
            layout,
        })
    }

    pub fn cast<T: Scalar>(&self) -> MhvaeParams<T> {
        MhvaeParams {
            config: self.config.clone(),
            store: self.store.cast(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    /// Exact equality of every tensor and running statistic.
    pub fn bitwise_eq(&self, other: &MhvaeParams<S>) -> bool {
        let same = |a: &Tensor<S>, b: &Tensor<S>| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
        };
        self.config == other.config
            && self.store.len() == other.store.len()
            && self.store.iter().zip(other.store.iter()).all(|(a, b)| a.name == b.name && same(&a.value, &b.value))
            && self.bn_stats.len() == other.bn_stats.len()
            && self
                .bn_stats
                .iter()
                .zip(&other.bn_stats)
                .all(|(a, b)| same(&a.mean, &b.mean) && same(&a.var, &b.var))
    }
}

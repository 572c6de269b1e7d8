use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Fully connected trunk. With no hidden layers the encoder trunk is the
    /// identity and every head is affine.
    Mlp,
    /// Stride-2, 4×4 convolutions followed by one dense layer.
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Swish,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Likelihood {
    /// Independent Bernoulli per entry, targets in `[0, 1]`.
    Bernoulli,
    /// One class per datapoint; the encoder sees the one-hot vector.
    Categorical { classes: usize },
    /// Diagonal Gaussian with a fixed log-variance around the decoded mean.
    Gaussian { log_var: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: NetKind,
    pub input_shape: Vec<usize>,
    /// Trunk widths (MLP) or channel counts (conv).
    pub hidden_sizes: Vec<usize>,
    pub h_dim: usize,
    pub z_dim: usize,
    pub likelihood: Likelihood,
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub drop_prob: f64,
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

impl ModalitySpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Uppercase initial, used as a short tag for input subsets.
    pub fn tag(&self) -> String {
        self.name
            .chars()
            .next()
            .map(|c| c.to_ascii_uppercase().to_string())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    pub hidden_sizes: Vec<usize>,
    pub zc_dim: usize,
    pub kl_weight: f64,
    pub activation: Activation,
}

/// How `q(z^c | ·)` combines the modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    /// One core encoder over the concatenated, dropout-masked representations.
    #[default]
    Mrd,
    /// Product of per-modality Gaussian experts and a standard-normal prior.
    Poe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub core: CoreSpec,
    #[serde(default)]
    pub posterior: PosteriorKind,
}

fn check_weight(name: &str, what: &str, v: f64) -> Result<(), ModelError> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(ModelError::Config(format!(
            "{name}: {what} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

fn check_activation(name: &str, a: &Activation) -> Result<(), ModelError> {
    if let Activation::LeakyRelu { slope } = a {
        if !slope.is_finite() {
            return Err(ModelError::Config(format!("{name}: non-finite leaky slope")));
        }
    }
    Ok(())
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = &self.name;
        let err = |msg: String| Err(ModelError::Config(format!("modality {n}: {msg}")));
        if n.is_empty() {
            return Err(ModelError::Config("modality name is empty".into()));
        }
        if self.z_dim == 0 || self.h_dim == 0 {
            return err("z_dim and h_dim must be at least 1".into());
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return err(format!("invalid input_shape {:?}", self.input_shape));
        }
        if self.hidden_sizes.contains(&0) {
            return err("hidden sizes must be positive".into());
        }
        check_weight(n, "recon_weight", self.recon_weight)?;
        check_weight(n, "kl_weight", self.kl_weight)?;
        if !(0.0..1.0).contains(&self.drop_prob) {
            return err(format!("drop_prob {} outside [0, 1)", self.drop_prob));
        }
        check_activation(n, &self.activation)?;
        match self.kind {
            NetKind::Mlp => {
                let expect = self.hidden_sizes.last().copied().unwrap_or(self.input_len());
                if self.h_dim != expect {
                    return err(format!(
                        "h_dim {} must equal the trunk output width {expect}",
                        self.h_dim
                    ));
                }
            }
            NetKind::Conv => {
                if self.input_shape.len() != 3 {
                    return err("conv input_shape must be [channels, height, width]".into());
                }
                if self.hidden_sizes.is_empty() {
                    return err("conv trunk needs at least one channel count".into());
                }
                let f = 1usize << self.hidden_sizes.len();
                if self.input_shape[1] % f != 0 || self.input_shape[2] % f != 0 {
                    return err(format!(
                        "spatial size {:?} not divisible by {f}",
                        &self.input_shape[1..]
                    ));
                }
                if self.batch_norm {
                    return err("batch_norm is only supported in MLP trunks".into());
                }
            }
        }
        match self.likelihood {
            Likelihood::Categorical { classes } => {
                if classes < 2 || self.input_len() != classes {
                    return err(format!(
                        "categorical input width {} must equal classes {classes} (≥ 2)",
                        self.input_len()
                    ));
                }
                if self.kind != NetKind::Mlp {
                    return err("categorical modalities use an MLP".into());
                }
            }
            Likelihood::Gaussian { log_var } => {
                if !log_var.is_finite() {
                    return err("non-finite likelihood log_var".into());
                }
            }
            Likelihood::Bernoulli => {}
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.modalities.is_empty() {
            return Err(ModelError::Config("at least one modality is required".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate()?;
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(ModelError::Config(format!("duplicate modality {}", m.name)));
            }
        }
        if self.core.zc_dim == 0 || self.core.hidden_sizes.contains(&0) {
            return Err(ModelError::Config("core sizes must be positive".into()));
        }
        check_weight("core", "kl_weight", self.core.kl_weight)?;
        check_activation("core", &self.core.activation)
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, key: &str) -> Option<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == key)
            .or_else(|| self.modalities.iter().position(|m| m.tag() == key))
    }

    pub fn drop_probs(&self) -> Vec<f64> {
        self.modalities.iter().map(|m| m.drop_prob).collect()
    }

    /// The image/label architecture used for MNIST: 512-unit image trunk with
    /// batch norm, 128-unit label trunk, 64-unit core, 16/16/10 latents.
    pub fn mnist() -> Self {
        let lrelu = Activation::LeakyRelu { slope: 0.01 };
        ModelConfig {
            modalities: vec![
                ModalitySpec {
                    name: "image".into(),
                    kind: NetKind::Mlp,
                    input_shape: vec![784],
                    hidden_sizes: vec![512, 512],
                    h_dim: 512,
                    z_dim: 16,
                    likelihood: Likelihood::Bernoulli,
                    recon_weight: 1.0,
                    kl_weight: 1.0,
                    drop_prob: 0.5,
                    activation: lrelu,
                    batch_norm: true,
                },
                ModalitySpec {
                    name: "label".into(),
                    kind: NetKind::Mlp,
                    input_shape: vec![10],
                    hidden_sizes: vec![128, 128],
                    h_dim: 128,
                    z_dim: 16,
                    likelihood: Likelihood::Categorical { classes: 10 },
                    recon_weight: 1.0,
                    kl_weight: 1.0,
                    drop_prob: 0.5,
                    activation: lrelu,
                    batch_norm: false,
                },
            ],
            core: CoreSpec {
                hidden_sizes: vec![64, 64],
                zc_dim: 10,
                kl_weight: 1.0,
                activation: lrelu,
            },
            posterior: PosteriorKind::Mrd,
        }
    }

    /// Convolutional image network with swish activations for FashionMNIST.
    pub fn fashion_mnist() -> Self {
        let mut cfg = ModelConfig::mnist();
        let image = &mut cfg.modalities[0];
        image.kind = NetKind::Conv;
        image.input_shape = vec![1, 28, 28];
        image.hidden_sizes = vec![32, 64];
        image.h_dim = 128;
        image.activation = Activation::Swish;
        image.batch_norm = false;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_validate() {
        ModelConfig::mnist().validate().unwrap();
        ModelConfig::fashion_mnist().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = ModelConfig::mnist();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["core"]["bogus"] = 1.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut cfg = ModelConfig::mnist();
        cfg.modalities[0].h_dim = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::mnist();
        cfg.modalities[1].drop_prob = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::mnist();
        cfg.modalities[1].name = "image".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::mnist();
        cfg.core.kl_weight = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modality_lookup_by_name_or_tag() {
        let cfg = ModelConfig::mnist();
        assert_eq!(cfg.modality_index("label"), Some(1));
        assert_eq!(cfg.modality_index("I"), Some(0));
        assert_eq!(cfg.modality_index("X"), None);
    }
}

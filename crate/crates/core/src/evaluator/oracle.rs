use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{
    Activation, Batch, CoreSpec, Likelihood, MhvaeParams, ModalityBatch, ModalitySpec,
    ModelConfig, NetKind, PosteriorKind,
};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::{substream, Stream};

use super::EvalError;

const MAX_LATENT: usize = 8;
const MAX_OBSERVED: usize = 16;

/// Latent and observed widths of the linear-Gaussian model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleDims {
    pub zc: usize,
    pub z: Vec<usize>,
    pub x: Vec<usize>,
}

impl OracleDims {
    /// One core dimension, two modalities with 2-D latents and 3-D observations.
    pub fn small() -> Self {
        OracleDims {
            zc: 1,
            z: vec![2, 2],
            x: vec![3, 3],
        }
    }
}

/// Affine-Gaussian generative model
/// `z^c ~ N(0, I)`, `z_i = A_i z^c + a_i + N(0, D_i)`, `x_i = B_i z_i + b_i + N(0, s_i I)`,
/// expressed as MHVAE parameters, plus its exact marginals.
#[derive(Clone, Debug)]
pub struct LinearGaussianOracle {
    pub params: MhvaeParams<f64>,
    pub dims: OracleDims,
    a: Vec<DMatrix<f64>>,
    a_off: Vec<DVector<f64>>,
    d: Vec<DVector<f64>>,
    b: Vec<DMatrix<f64>>,
    b_off: Vec<DVector<f64>>,
    s: Vec<f64>,
    x_mean: DVector<f64>,
    x_cov: DMatrix<f64>,
}

fn randn_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn randn_vector<R: Rng>(n: usize, scale: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = x.len() as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + diff.dot(&sol))
}

/// Writes `y = x W + b` with `W = m^T` into the named linear layer.
fn set_linear(store: &mut ParamStore<f64>, name: &str, m: &DMatrix<f64>, bias: &DVector<f64>) {
    let (rows, cols) = (m.ncols(), m.nrows());
    let w: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| m[(j, i)])
        .collect();
    let wid = store.id(&format!("{name}.w")).expect("layer exists");
    store
        .set_value(wid, Tensor::from_f64(&[rows, cols], &w).expect("sized"))
        .expect("shape matches");
    let bid = store.id(&format!("{name}.b")).expect("layer exists");
    store
        .set_value(bid, Tensor::from_f64(&[1, cols], bias.as_slice()).expect("sized"))
        .expect("shape matches");
}

/// Fixed log-variance head: zero weights, bias `log v`.
fn set_log_var(store: &mut ParamStore<f64>, name: &str, fan_in: usize, var: &DVector<f64>) {
    let zero = DMatrix::zeros(var.len(), fan_in);
    set_linear(store, name, &zero, &var.map(f64::ln));
}

/// Builds the oracle. Encoders are set to sensible, deliberately
/// over-dispersed proposals derived from the exact posteriors.
pub fn build_linear_gaussian_oracle(
    dims: &OracleDims,
    seed: u64,
) -> Result<LinearGaussianOracle, EvalError> {
    let n = dims.z.len();
    if n == 0 || dims.x.len() != n {
        return Err(EvalError::Config("oracle needs matching z and x widths".into()));
    }
    if dims.zc == 0 || dims.z.contains(&0) || dims.x.contains(&0) {
        return Err(EvalError::Config("oracle widths must be positive".into()));
    }
    if dims.zc > MAX_LATENT || dims.z.iter().any(|&z| z > MAX_LATENT) || dims.x.iter().any(|&x| x > MAX_OBSERVED) {
        return Err(EvalError::Config(format!(
            "oracle widths {dims:?} exceed {MAX_LATENT} per latent or {MAX_OBSERVED} per observation"
        )));
    }
    let mut rng = substream(seed, Stream::Synth, &[]);
    let mut a = Vec::new();
    let mut a_off = Vec::new();
    let mut d = Vec::new();
    let mut b = Vec::new();
    let mut b_off = Vec::new();
    let mut s = Vec::new();
    for i in 0..n {
        a.push(randn_matrix(dims.z[i], dims.zc, 0.9, &mut rng));
        a_off.push(randn_vector(dims.z[i], 0.5, &mut rng));
        d.push(DVector::from_fn(dims.z[i], |_, _| rng.random_range(0.2..0.5)));
        b.push(randn_matrix(dims.x[i], dims.z[i], 0.8, &mut rng));
        b_off.push(randn_vector(dims.x[i], 0.5, &mut rng));
        s.push(rng.random_range(0.4..0.8));
    }

    // Joint moments of (z_1..z_N) and (x_1..x_N).
    let zt: usize = dims.z.iter().sum();
    let xt: usize = dims.x.iter().sum();
    let zo: Vec<usize> = dims.z.iter().scan(0, |o, &w| { let s = *o; *o += w; Some(s) }).collect();
    let xo: Vec<usize> = dims.x.iter().scan(0, |o, &w| { let s = *o; *o += w; Some(s) }).collect();
    let mut z_cov = DMatrix::zeros(zt, zt);
    let mut zc_z = DMatrix::zeros(dims.zc, zt);
    let mut x_cov = DMatrix::zeros(xt, xt);
    let mut x_mean = DVector::zeros(xt);
    let mut z_x = DMatrix::zeros(zt, xt);
    let mut zc_x = DMatrix::zeros(dims.zc, xt);
    for i in 0..n {
        zc_z.view_mut((0, zo[i]), (dims.zc, dims.z[i])).copy_from(&a[i].transpose());
        for j in 0..n {
            let mut c = &a[i] * a[j].transpose();
            if i == j {
                c += DMatrix::from_diagonal(&d[i]);
            }
            z_cov.view_mut((zo[i], zo[j]), (dims.z[i], dims.z[j])).copy_from(&c);
        }
    }
    for i in 0..n {
        x_mean.rows_mut(xo[i], dims.x[i]).copy_from(&(&b[i] * &a_off[i] + &b_off[i]));
        zc_x.view_mut((0, xo[i]), (dims.zc, dims.x[i])).copy_from(&(a[i].transpose() * b[i].transpose()));
        for j in 0..n {
            let czz = z_cov.view((zo[i], zo[j]), (dims.z[i], dims.z[j])).clone_owned();
            let mut c = &b[i] * czz * b[j].transpose();
            if i == j {
                c += DMatrix::identity(dims.x[i], dims.x[i]) * s[i];
            }
            x_cov.view_mut((xo[i], xo[j]), (dims.x[i], dims.x[j])).copy_from(&c);
            let zx = z_cov.view((zo[i], zo[j]), (dims.z[i], dims.z[j])).clone_owned() * b[j].transpose();
            z_x.view_mut((zo[i], xo[j]), (dims.z[i], dims.x[j])).copy_from(&zx);
        }
    }

    let config = ModelConfig {
        modalities: (0..n)
            .map(|i| ModalitySpec {
                name: format!("m{i}"),
                kind: NetKind::Mlp,
                input_shape: vec![dims.x[i]],
                hidden_sizes: vec![dims.x[i]],
                h_dim: dims.x[i],
                z_dim: dims.z[i],
                likelihood: Likelihood::Gaussian { log_var: s[i].ln() },
                recon_weight: 1.0,
                kl_weight: 1.0,
                drop_prob: 0.5,
                activation: Activation::Identity,
                batch_norm: false,
            })
            .collect(),
        core: CoreSpec {
            hidden_sizes: vec![],
            zc_dim: dims.zc,
            kl_weight: 1.0,
            activation: Activation::Identity,
        },
        posterior: PosteriorKind::Mrd,
    };
    let mut params = MhvaeParams::<f64>::zeros(&config).map_err(EvalError::Model)?;
    let st = &mut params.store;
    let mut core_gain = DMatrix::zeros(dims.zc, xt);
    let mut core_var = DVector::zeros(dims.zc);
    for i in 0..n {
        let name = format!("m{i}");
        set_linear(st, &format!("{name}.prior.mean"), &a[i], &a_off[i]);
        set_log_var(st, &format!("{name}.prior.log_var"), dims.zc, &d[i]);
        set_linear(st, &format!("{name}.dec.0"), &b[i], &b_off[i]);
        let eye = DMatrix::identity(dims.x[i], dims.x[i]);
        set_linear(st, &format!("{name}.dec.out"), &eye, &DVector::zeros(dims.x[i]));

        // Centered trunk, so a dropped modality reads as one at its mean.
        let mx = x_mean.rows(xo[i], dims.x[i]).clone_owned();
        set_linear(st, &format!("{name}.enc.0"), &eye, &-&mx);

        // q(z_i | x_i): exact marginal posterior mean and variances.
        let cxx = x_cov.view((xo[i], xo[i]), (dims.x[i], dims.x[i])).clone_owned();
        let czx = z_x.view((zo[i], xo[i]), (dims.z[i], dims.x[i])).clone_owned();
        let gain = &czx * cxx.clone().try_inverse().expect("positive definite");
        let post = z_cov.view((zo[i], zo[i]), (dims.z[i], dims.z[i])).clone_owned() - &gain * czx.transpose();
        set_linear(st, &format!("{name}.q.mean"), &gain, &a_off[i]);
        set_log_var(st, &format!("{name}.q.log_var"), dims.x[i], &post.diagonal());

        // Core contribution: the single-modality posterior gain for z^c.
        let czc = zc_x.view((0, xo[i]), (dims.zc, dims.x[i])).clone_owned();
        let gain = &czc * cxx.try_inverse().expect("positive definite");
        let post = DMatrix::identity(dims.zc, dims.zc) - &gain * czc.transpose();
        core_gain.view_mut((0, xo[i]), (dims.zc, dims.x[i])).copy_from(&gain);
        core_var = core_var.sup(&post.diagonal());
    }
    // Widest single-modality variance, doubled, covers every input subset.
    set_linear(st, "core.q.mean", &core_gain, &DVector::zeros(dims.zc));
    set_log_var(st, "core.q.log_var", xt, &(core_var * 2.0));

    Ok(LinearGaussianOracle {
        params,
        dims: dims.clone(),
        a,
        a_off,
        d,
        b,
        b_off,
        s,
        x_mean,
        x_cov,
    })
}

impl LinearGaussianOracle {
    fn offsets(&self) -> Vec<usize> {
        self.dims.x.iter().scan(0, |o, &w| { let s = *o; *o += w; Some(s) }).collect()
    }

    /// Indices into the concatenated observation vector for modalities `set`.
    fn coords(&self, set: &[usize]) -> Vec<usize> {
        let xo = self.offsets();
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted
            .iter()
            .flat_map(|&i| xo[i]..xo[i] + self.dims.x[i])
            .collect()
    }

    /// Mean and covariance of all observations stacked.
    pub fn observation_moments(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.x_mean, &self.x_cov)
    }

    /// Exact `log p(x_O)` for row `row` of `data`.
    pub fn exact_log_likelihood(&self, data: &Batch<f64>, row: usize, observed: &[usize]) -> f64 {
        let idx = self.coords(observed);
        let mut x = Vec::with_capacity(idx.len());
        let mut sorted = observed.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &i in &sorted {
            x.extend_from_slice(data.modalities[i].values.row(row));
        }
        let x = DVector::from_vec(x);
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&k| self.x_mean[k]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.x_cov[(idx[r], idx[c])]);
        mvn_logpdf(&x, &mean, &cov)
    }

    /// Exact `log p(x_j | x_G)`.
    pub fn exact_conditional(&self, data: &Batch<f64>, row: usize, j: usize, given: &[usize]) -> f64 {
        let mut with_j = given.to_vec();
        with_j.push(j);
        self.exact_log_likelihood(data, row, &with_j) - self.exact_log_likelihood(data, row, given)
    }

    /// `n` ancestral samples from the generative model.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch<f64> {
        let m = self.dims.z.len();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); m];
        for _ in 0..n {
            let zc = DVector::from_fn(self.dims.zc, |_, _| rng.sample::<f64, _>(StandardNormal));
            for i in 0..m {
                let e = DVector::from_fn(self.dims.z[i], |k, _| {
                    self.d[i][k].sqrt() * rng.sample::<f64, _>(StandardNormal)
                });
                let z = &self.a[i] * &zc + &self.a_off[i] + e;
                let sd = self.s[i].sqrt();
                let nx = DVector::from_fn(self.dims.x[i], |_, _| sd * rng.sample::<f64, _>(StandardNormal));
                let x = &self.b[i] * z + &self.b_off[i] + nx;
                cols[i].extend(x.iter());
            }
        }
        Batch {
            modalities: cols
                .into_iter()
                .zip(&self.dims.x)
                .map(|(v, &w)| ModalityBatch::dense(Tensor::new(&[n, w], v).expect("sized")))
                .collect(),
        }
    }
}

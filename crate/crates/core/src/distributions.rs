//! Diagonal-Gaussian, Bernoulli and categorical densities on the graph.
//!
//! Every function works row-wise on a batch: inputs are `B×D` and the
//! result is a `[B]` vector of per-datapoint values. A single distribution
//! is the `B = 1` case.

use std::f64::consts::PI;

use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};

/// Bounds applied to every log-variance at construction.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Batch of diagonal Gaussians `N(mean, exp(log_var))`.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_var: Var,
}

impl DiagGaussian {
    /// Clamps `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new<S: Scalar>(
        g: &mut Graph<S>,
        mean: Var,
        log_var: Var,
    ) -> Result<Self, NumericsError> {
        check_same_shape(g, mean, log_var, "DiagGaussian")?;
        let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DiagGaussian { mean, log_var })
    }

    /// `N(0, I)` with the given `B×D` shape, as constants.
    pub fn standard<S: Scalar>(g: &mut Graph<S>, shape: &[usize]) -> Self {
        let mean = g.constant(Tensor::zeros(shape));
        let log_var = g.constant(Tensor::zeros(shape));
        DiagGaussian { mean, log_var }
    }

    pub fn dim<S: Scalar>(&self, g: &Graph<S>) -> usize {
        g.value(self.mean).row_len()
    }
}

/// Logits of independent Bernoulli pixels.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliParams {
    pub logits: Var,
}

/// Logits of a categorical distribution over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalParams {
    pub logits: Var,
}

fn check_same_shape<S: Scalar>(
    g: &Graph<S>,
    a: Var,
    b: Var,
    op: &'static str,
) -> Result<(), NumericsError> {
    if g.shape(a) != g.shape(b) {
        return Err(NumericsError::Dimension {
            op,
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Sums every non-leading axis, leaving one value per datapoint.
fn row_sums<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var, NumericsError> {
    let b = g.shape(x)[0];
    let flat = if g.shape(x).len() == 2 {
        x
    } else {
        let w = g.value(x).row_len();
        g.reshape(x, &[b, w])?
    };
    g.sum_axis(flat, 1)
}

/// Reparameterized draw `mean + exp(log_var / 2) · noise`.
pub fn rsample<S: Scalar>(
    g: &mut Graph<S>,
    q: &DiagGaussian,
    noise: Var,
) -> Result<Var, NumericsError> {
    check_same_shape(g, q.mean, noise, "rsample")?;
    let half = g.scale(q.log_var, 0.5);
    let std = g.exp(half)?;
    let scaled = g.mul(std, noise)?;
    g.add(q.mean, scaled)
}

/// `KL[q || N(0, I)] = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_std_normal<S: Scalar>(g: &mut Graph<S>, q: &DiagGaussian) -> Result<Var, NumericsError> {
    let mu2 = g.mul(q.mean, q.mean)?;
    let var = g.exp(q.log_var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, q.log_var)?;
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    row_sums(g, t)
}

/// `KL[q || p] = ½ Σ [log σp² − log σq² + (σq² + (μq − μp)²) / σp² − 1]`.
pub fn kl_diag<S: Scalar>(
    g: &mut Graph<S>,
    q: &DiagGaussian,
    p: &DiagGaussian,
) -> Result<Var, NumericsError> {
    check_same_shape(g, q.mean, p.mean, "kl_diag")?;
    let lv_diff = g.sub(q.log_var, p.log_var)?;
    let var_ratio = g.exp(lv_diff)?;
    let d = g.sub(q.mean, p.mean)?;
    let d2 = g.mul(d, d)?;
    let neg_lv_p = g.neg(p.log_var)?;
    let inv_var_p = g.exp(neg_lv_p)?;
    let maha = g.mul(d2, inv_var_p)?;
    let t = g.add(var_ratio, maha)?;
    let t = g.sub(t, lv_diff)?;
    let t = g.add_scalar(t, -1.0);
    let t = g.scale(t, 0.5);
    row_sums(g, t)
}

/// `Σ [x log σ(l) + (1 − x) log(1 − σ(l))] = Σ [x·l − softplus(l)]`.
pub fn bernoulli_ll<S: Scalar>(
    g: &mut Graph<S>,
    params: &BernoulliParams,
    x: Var,
) -> Result<Var, NumericsError> {
    check_same_shape(g, params.logits, x, "bernoulli_ll")?;
    if let Some(bad) = g
        .value(x)
        .data()
        .iter()
        .find(|v| !(**v >= S::zero() && **v <= S::one()))
    {
        return Err(NumericsError::Domain {
            op: "bernoulli_ll",
            detail: format!("target {bad} outside [0, 1]"),
        });
    }
    let xl = g.mul(x, params.logits)?;
    let sp = g.softplus(params.logits)?;
    let t = g.sub(xl, sp)?;
    row_sums(g, t)
}

/// Log-probability of one class per row.
pub fn categorical_ll<S: Scalar>(
    g: &mut Graph<S>,
    params: &CategoricalParams,
    classes: &[usize],
) -> Result<Var, NumericsError> {
    let shape = g.shape(params.logits).to_vec();
    if shape.len() != 2 || shape[0] != classes.len() {
        return Err(NumericsError::Shape(format!(
            "categorical_ll: logits {shape:?} for {} class indices",
            classes.len()
        )));
    }
    let c = shape[1];
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(NumericsError::Domain {
            op: "categorical_ll",
            detail: format!("class index {bad} out of range for {c} classes"),
        });
    }
    let mut one_hot = Tensor::<S>::zeros(&shape);
    for (r, &k) in classes.iter().enumerate() {
        one_hot.data_mut()[r * c + k] = S::one();
    }
    let ls = g.log_softmax(params.logits)?;
    let sel = g.constant(one_hot);
    let picked = g.mul(ls, sel)?;
    g.sum_axis(picked, 1)
}

/// `Σ [−½ log 2π − ½ log σ² − ½ (x − μ)² / σ²]`.
pub fn gaussian_ll<S: Scalar>(
    g: &mut Graph<S>,
    q: &DiagGaussian,
    x: Var,
) -> Result<Var, NumericsError> {
    check_same_shape(g, q.mean, x, "gaussian_ll")?;
    let d = g.sub(x, q.mean)?;
    let d2 = g.mul(d, d)?;
    let neg_lv = g.neg(q.log_var)?;
    let prec = g.exp(neg_lv)?;
    let maha = g.mul(d2, prec)?;
    let t = g.add(maha, q.log_var)?;
    let t = g.add_scalar(t, (2.0 * PI).ln());
    let t = g.scale(t, -0.5);
    row_sums(g, t)
}

/// Standard-normal log-density per row.
pub fn std_normal_ll<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var, NumericsError> {
    let shape = g.shape(x).to_vec();
    let p = DiagGaussian::standard(g, &shape);
    gaussian_ll(g, &p, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(g: &mut Graph<f64>, mean: &[f64], log_var: &[f64]) -> DiagGaussian {
        let d = mean.len();
        let m = g.input(Tensor::from_f64(&[1, d], mean).unwrap());
        let lv = g.input(Tensor::from_f64(&[1, d], log_var).unwrap());
        DiagGaussian::new(g, m, lv).unwrap()
    }

    #[test]
    fn rsample_with_zero_noise_is_the_mean() {
        let mut g = Graph::new();
        let q = gauss(&mut g, &[1.5, -2.0], &[0.3, 4.0]);
        let e = g.constant(Tensor::zeros(&[1, 2]));
        let z = rsample(&mut g, &q, e).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, -2.0]);
    }

    #[test]
    fn rsample_collapses_at_clamped_variance() {
        let mut g = Graph::new();
        let q = gauss(&mut g, &[0.7], &[-1e6]);
        assert_eq!(g.value(q.log_var).item(), -20.0);
        let e = g.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let z = rsample(&mut g, &q, e).unwrap();
        assert!((g.value(z).item() - 0.7).abs() < 1e-4);
    }

    #[test]
    fn rsample_monte_carlo_mean() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::full(&[n, 1], 0.8));
        let lv = g.constant(Tensor::full(&[n, 1], (1.5f64).ln()));
        let q = DiagGaussian::new(&mut g, m, lv).unwrap();
        let e = g.constant(Tensor::randn(&[n, 1], &mut rng));
        let z = rsample(&mut g, &q, e).unwrap();
        let mean = g.value(z).sum() / n as f64;
        let se = (1.5f64 / n as f64).sqrt();
        assert!((mean - 0.8).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn kl_reference_values() {
        let mut g = Graph::new();
        let q = gauss(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
        let k = kl_std_normal(&mut g, &q).unwrap();
        assert_eq!(g.value(k).item(), 0.0);

        let q = gauss(&mut g, &[1.0], &[0.0]);
        let k = kl_std_normal(&mut g, &q).unwrap();
        assert!((g.value(k).item() - 0.5).abs() < 1e-12);

        let q = gauss(&mut g, &[0.0], &[0.0]);
        let p = gauss(&mut g, &[0.0], &[4f64.ln()]);
        let k = kl_diag(&mut g, &q, &p).unwrap();
        assert!((g.value(k).item() - 0.318_147_180_559_945_3).abs() < 1e-12);

        let q = gauss(&mut g, &[0.3, -1.0], &[0.2, -0.4]);
        let k = kl_diag(&mut g, &q, &q).unwrap();
        assert!(g.value(k).item().abs() < 1e-15);
    }

    #[test]
    fn kl_diag_against_standard_matches_kl_std_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let m = g.constant(Tensor::randn(&[3, 4], &mut rng));
            let lv = g.constant(Tensor::randn(&[3, 4], &mut rng));
            let q = DiagGaussian::new(&mut g, m, lv).unwrap();
            let p = DiagGaussian::standard(&mut g, &[3, 4]);
            let a = kl_diag(&mut g, &q, &p).unwrap();
            let b = kl_std_normal(&mut g, &q).unwrap();
            for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
                assert!(*x >= 0.0);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_dimension_mismatch_is_rejected() {
        let mut g = Graph::new();
        let q = gauss(&mut g, &[0.0, 1.0], &[0.0, 0.0]);
        let p = gauss(&mut g, &[0.0], &[0.0]);
        assert!(kl_diag(&mut g, &q, &p).is_err());
    }

    #[test]
    fn bernoulli_reference_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 784]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::uniform(&[1, 784], 0.0, 1.0, &mut rng));
        let ll = bernoulli_ll(&mut g, &BernoulliParams { logits: l }, x).unwrap();
        assert!((g.value(ll).item() + 784.0 * 2f64.ln()).abs() < 1e-9);
        assert!((g.value(ll).item() + 543.427).abs() < 1e-3);

        let l = g.constant(Tensor::full(&[1, 3], 1000.0));
        let x = g.constant(Tensor::ones(&[1, 3]));
        let ll = bernoulli_ll(&mut g, &BernoulliParams { logits: l }, x).unwrap();
        assert!(g.value(ll).item().abs() < 1e-12);

        let bad = g.constant(Tensor::full(&[1, 3], 1.5));
        assert!(matches!(
            bernoulli_ll(&mut g, &BernoulliParams { logits: l }, bad),
            Err(NumericsError::Domain { .. })
        ));
    }

    #[test]
    fn bernoulli_is_maximized_at_matching_probability() {
        let x = 0.3f64;
        let at = |logit: f64| {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::from_f64(&[1, 1], &[logit]).unwrap());
            let xv = g.constant(Tensor::from_f64(&[1, 1], &[x]).unwrap());
            let ll = bernoulli_ll(&mut g, &BernoulliParams { logits: l }, xv).unwrap();
            g.value(ll).item()
        };
        let best = (x / (1.0 - x)).ln();
        assert!(at(best) > at(best + 0.05));
        assert!(at(best) > at(best - 0.05));
    }

    #[test]
    fn categorical_reference_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let ll = categorical_ll(&mut g, &CategoricalParams { logits: l }, &[4]).unwrap();
        assert!((g.value(ll).item() + 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 10];
        logits[7] = 1000.0;
        let l = g.constant(Tensor::from_f64(&[1, 10], &logits).unwrap());
        let ll = categorical_ll(&mut g, &CategoricalParams { logits: l }, &[7]).unwrap();
        assert!(g.value(ll).item().abs() < 1e-12);
        assert!(categorical_ll(&mut g, &CategoricalParams { logits: l }, &[10]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = g.constant(Tensor::randn(&[1, 10], &mut rng));
        let total: f64 = (0..10)
            .map(|c| {
                let ll = categorical_ll(&mut g, &CategoricalParams { logits: l }, &[c]).unwrap();
                g.value(ll).item().exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let ll = std_normal_ll(&mut g, x).unwrap();
        assert!((g.value(ll).item() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        // Trapezoid quadrature on [μ − 12σ, μ + 12σ].
        let (mu, lv) = (0.4f64, (0.7f64).ln());
        let sd = (lv.exp()).sqrt();
        let n = 20_001;
        let lo = mu - 12.0 * sd;
        let h = 24.0 * sd / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::full(&[n, 1], mu));
        let l = g.constant(Tensor::full(&[n, 1], lv));
        let q = DiagGaussian::new(&mut g, m, l).unwrap();
        let xv = g.constant(Tensor::from_f64(&[n, 1], &xs).unwrap());
        let ll = gaussian_ll(&mut g, &q, xv).unwrap();
        let dens: Vec<f64> = g.value(ll).data().iter().map(|v| v.exp()).collect();
        let integral = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n - 1]));
        assert!((integral - 1.0).abs() <= 1e-3);
        let at_mean = dens[(n - 1) / 2];
        assert!(dens.iter().all(|&d| d <= at_mean + 1e-15));
    }

    #[test]
    fn rsample_gradient_with_frozen_noise() {
        use crate::numerics::{finite_diff_check, GradCheckConfig, ParamId, ParamStore};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let mut store = ParamStore::new();
        store.insert("mean", Tensor::randn(&[2, 3], &mut rng)).unwrap();
        store.insert("log_var", Tensor::randn(&[2, 3], &mut rng)).unwrap();
        let report = finite_diff_check(
            |st: &ParamStore<f64>| -> Result<_, NumericsError> {
                let mut g = Graph::new();
                let m = g.param(st, ParamId(0));
                let lv = g.param(st, ParamId(1));
                let q = DiagGaussian::new(&mut g, m, lv)?;
                let e = g.constant(noise.clone());
                let z = rsample(&mut g, &q, e)?;
                let z2 = g.mul(z, z)?;
                let l = g.sum(z2);
                Ok((g, l))
            },
            &mut store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_is_nonnegative_and_zero_only_at_equality(
            qm in prop::collection::vec(-5.0f64..5.0, 3),
            qv in prop::collection::vec(-4.0f64..4.0, 3),
            pm in prop::collection::vec(-5.0f64..5.0, 3),
            pv in prop::collection::vec(-4.0f64..4.0, 3),
        ) {
            let mut g = Graph::new();
            let q = gauss(&mut g, &qm, &qv);
            let p = gauss(&mut g, &pm, &pv);
            let k = kl_diag(&mut g, &q, &p).unwrap();
            let same = kl_diag(&mut g, &q, &q).unwrap();
            let std = kl_std_normal(&mut g, &q).unwrap();
            let gap: f64 = qm.iter().zip(&pm).map(|(a, b)| (a - b).abs()).sum::<f64>()
                + qv.iter().zip(&pv).map(|(a, b)| (a - b).abs()).sum::<f64>();
            prop_assert!(g.value(k).item() >= 0.0);
            prop_assert!(g.value(std).item() >= 0.0);
            prop_assert!(g.value(same).item().abs() < 1e-12);
            if gap > 1e-3 {
                prop_assert!(g.value(k).item() > 0.0);
            }
        }

        #[test]
        fn categorical_is_shift_invariant(
            logits in prop::collection::vec(-10.0f64..10.0, 10),
            c in -100.0f64..100.0,
            class in 0usize..10,
        ) {
            let mut g = Graph::<f64>::new();
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let a = g.constant(Tensor::from_f64(&[1, 10], &logits).unwrap());
            let b = g.constant(Tensor::from_f64(&[1, 10], &shifted).unwrap());
            let la = categorical_ll(&mut g, &CategoricalParams { logits: a }, &[class]).unwrap();
            let lb = categorical_ll(&mut g, &CategoricalParams { logits: b }, &[class]).unwrap();
            prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-10);
        }
    }
}

//! Modality representation dropout and the product-of-experts combiner.

use rand::Rng;

use crate::distributions::DiagGaussian;
use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("mask config needs at least one modality")]
    Empty,
    #[error("drop probability {value} for modality {index} must lie in [0, 1)")]
    DropProb { index: usize, value: f64 },
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
    #[error("a mask must keep at least one modality")]
    NothingKept,
}

/// Per-modality drop probabilities `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    drop_prob: Vec<f64>,
}

impl MaskConfig {
    pub fn new(drop_prob: Vec<f64>) -> Result<Self, MaskError> {
        if drop_prob.is_empty() {
            return Err(MaskError::Empty);
        }
        for (index, &value) in drop_prob.iter().enumerate() {
            if !(0.0..1.0).contains(&value) {
                return Err(MaskError::DropProb { index, value });
            }
        }
        Ok(MaskConfig { drop_prob })
    }

    pub fn drop_prob(&self) -> &[f64] {
        &self.drop_prob
    }

    pub fn len(&self) -> usize {
        self.drop_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drop_prob.is_empty()
    }
}

/// `keep[i] == true` means modality `i`'s representation reaches the core encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(keep: Vec<bool>) -> Result<Self, MaskError> {
        if !keep.iter().any(|&k| k) {
            return Err(MaskError::NothingKept);
        }
        Ok(Mask { keep })
    }

    pub fn all(n: usize) -> Self {
        Mask {
            keep: vec![true; n.max(1)],
        }
    }

    /// Keeps exactly the listed modalities.
    pub fn subset(n: usize, kept: &[usize]) -> Result<Self, MaskError> {
        let mut keep = vec![false; n];
        for &i in kept {
            if i >= n {
                return Err(MaskError::Length {
                    expected: n,
                    got: i + 1,
                });
            }
            keep[i] = true;
        }
        Mask::new(keep)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Bit `i` set iff modality `i` is kept.
    pub fn bits(&self) -> usize {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| 1 << i)
            .sum()
    }
}

/// Independent keep draws with probability `1 − w_i`, redrawn until at
/// least one modality survives.
pub fn sample_mask<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> Mask {
    loop {
        let keep: Vec<bool> = cfg
            .drop_prob
            .iter()
            .map(|&w| rng.random::<f64>() >= w)
            .collect();
        if keep.iter().any(|&k| k) {
            return Mask { keep };
        }
    }
}

/// Zeroes the rows of each dropped representation. `hidden[i]` is `B×H_i`
/// and `masks[b]` is the mask of datapoint `b`.
pub fn apply_mask<S: Scalar>(
    g: &mut Graph<S>,
    hidden: &[Var],
    masks: &[Mask],
) -> Result<Vec<Var>, NumericsError> {
    let mut out = Vec::with_capacity(hidden.len());
    for (i, &h) in hidden.iter().enumerate() {
        let shape = g.shape(h).to_vec();
        if masks.len() != shape[0] {
            return Err(NumericsError::Shape(format!(
                "apply_mask: {} masks for a batch of {}",
                masks.len(),
                shape[0]
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.len() != hidden.len()) {
            return Err(NumericsError::Shape(format!(
                "apply_mask: mask of length {} for {} representations",
                m.len(),
                hidden.len()
            )));
        }
        if masks.iter().all(|m| m.keep[i]) {
            out.push(h);
            continue;
        }
        let width = g.value(h).row_len();
        let mut gate = Tensor::<S>::zeros(&shape);
        for (b, m) in masks.iter().enumerate() {
            if m.keep[i] {
                gate.data_mut()[b * width..(b + 1) * width].fill(S::one());
            }
        }
        let gate = g.constant(gate);
        out.push(g.mul(h, gate)?);
    }
    Ok(out)
}

/// Precision-weighted product of the experts and a standard-normal prior
/// expert: `T = 1 + Σ 1/σ_i²`, `σ² = 1/T`, `μ = σ² Σ μ_i/σ_i²`.
pub fn poe_combine<S: Scalar>(
    g: &mut Graph<S>,
    experts: &[DiagGaussian],
    shape: &[usize],
) -> Result<DiagGaussian, NumericsError> {
    let gates = vec![None; experts.len()];
    poe_combine_gated(g, experts, &gates, shape)
}

/// [`poe_combine`] where expert `i` only contributes on rows whose entry in
/// `gates[i]` (a 0/1 constant of the same shape) is one.
pub fn poe_combine_gated<S: Scalar>(
    g: &mut Graph<S>,
    experts: &[DiagGaussian],
    gates: &[Option<Var>],
    shape: &[usize],
) -> Result<DiagGaussian, NumericsError> {
    if gates.len() != experts.len() {
        return Err(NumericsError::Shape(format!(
            "poe_combine: {} gates for {} experts",
            gates.len(),
            experts.len()
        )));
    }
    let mut precision = g.constant(Tensor::ones(shape));
    let mut weighted = g.constant(Tensor::zeros(shape));
    for (e, gate) in experts.iter().zip(gates) {
        if g.shape(e.mean) != shape {
            return Err(NumericsError::Dimension {
                op: "poe_combine",
                left: g.shape(e.mean).to_vec(),
                right: shape.to_vec(),
            });
        }
        let neg_lv = g.neg(e.log_var)?;
        let mut p = g.exp(neg_lv)?;
        if let Some(gate) = gate {
            p = g.mul(p, *gate)?;
        }
        precision = g.add(precision, p)?;
        let pm = g.mul(p, e.mean)?;
        weighted = g.add(weighted, pm)?;
    }
    let log_t = g.log(precision)?;
    let log_var = g.neg(log_t)?;
    let var = g.exp(log_var)?;
    let mean = g.mul(var, weighted)?;
    DiagGaussian::new(g, mean, log_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(matches!(MaskConfig::new(vec![]), Err(MaskError::Empty)));
        assert!(matches!(
            MaskConfig::new(vec![0.5, 1.0]),
            Err(MaskError::DropProb { index: 1, .. })
        ));
        assert!(MaskConfig::new(vec![0.0, 0.99]).is_ok());
        assert!(Mask::new(vec![false, false]).is_err());
    }

    #[test]
    fn single_modality_is_always_kept() {
        let cfg = MaskConfig::new(vec![0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(sample_mask(&cfg, &mut rng).keep(), &[true]);
        }
    }

    #[test]
    fn never_drops_everything() {
        let cfg = MaskConfig::new(vec![0.9, 0.9, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000_000 {
            assert!(sample_mask(&cfg, &mut rng).keep().iter().any(|&k| k));
        }
    }

    #[test]
    fn full_mask_is_identity_and_drop_zeroes() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = g.input(Tensor::randn(&[2, 3], &mut rng));
        let b = g.input(Tensor::randn(&[2, 4], &mut rng));
        let out = apply_mask(&mut g, &[a, b], &[Mask::all(2), Mask::all(2)]).unwrap();
        assert_eq!(g.value(out[0]).data(), g.value(a).data());
        assert_eq!(g.value(out[1]).data(), g.value(b).data());

        let m = Mask::new(vec![true, false]).unwrap();
        let out = apply_mask(&mut g, &[a, b], &[m.clone(), Mask::all(2)]).unwrap();
        assert_eq!(g.value(out[0]).data(), g.value(a).data());
        assert!(g.value(out[1]).row(0).iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out[1]).row(1), g.value(b).row(1));

        assert!(apply_mask(&mut g, &[a, b], &[m]).is_err());
    }

    #[test]
    fn dropped_branch_receives_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = g.input(Tensor::randn(&[1, 3], &mut rng));
        let b = g.input(Tensor::randn(&[1, 3], &mut rng));
        let m = Mask::new(vec![true, false]).unwrap();
        let out = apply_mask(&mut g, &[a, b], &[m]).unwrap();
        let s = g.add(out[0], out[1]).unwrap();
        let sq = g.mul(s, s).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        let ga = grads.get(a).unwrap();
        for (gv, av) in ga.data().iter().zip(g.value(a).data()) {
            assert!((gv - 2.0 * av).abs() < 1e-12);
        }
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn expert(g: &mut Graph<f64>, mean: &[f64], var: &[f64]) -> DiagGaussian {
        let d = mean.len();
        let m = g.input(Tensor::from_f64(&[1, d], mean).unwrap());
        let lvs: Vec<f64> = var.iter().map(|v| v.ln()).collect();
        let lv = g.input(Tensor::from_f64(&[1, d], &lvs).unwrap());
        DiagGaussian::new(g, m, lv).unwrap()
    }

    #[test]
    fn poe_with_no_experts_is_the_prior() {
        let mut g = Graph::<f64>::new();
        let q = poe_combine(&mut g, &[], &[1, 3]).unwrap();
        assert!(g.value(q.mean).data().iter().all(|&v| v == 0.0));
        assert!(g.value(q.log_var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poe_is_order_invariant() {
        let mut g = Graph::<f64>::new();
        let a = expert(&mut g, &[0.3, -1.0], &[0.5, 2.0]);
        let b = expert(&mut g, &[1.7, 0.2], &[1.5, 0.1]);
        let ab = poe_combine(&mut g, &[a, b], &[1, 2]).unwrap();
        let ba = poe_combine(&mut g, &[b, a], &[1, 2]).unwrap();
        for (x, y) in g.value(ab.mean).data().iter().zip(g.value(ba.mean).data()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in g.value(ab.log_var).data().iter().zip(g.value(ba.log_var).data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn poe_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = expert(&mut g, &[0.3, -1.0], &[0.5, 2.0]);
        assert!(poe_combine(&mut g, &[a], &[1, 3]).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sampled_masks_keep_something(w in prop::collection::vec(0.0f64..0.99, 1..5), seed in any::<u64>()) {
            let cfg = MaskConfig::new(w).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let m = sample_mask(&cfg, &mut rng);
                prop_assert_eq!(m.len(), cfg.len());
                prop_assert!(m.keep().iter().any(|&k| k));
            }
        }

        #[test]
        fn poe_is_order_invariant_and_sharper_than_each_expert(
            experts in prop::collection::vec(
                (prop::collection::vec(-3.0f64..3.0, 2), prop::collection::vec(0.05f64..5.0, 2)),
                1..5,
            ),
        ) {
            let mut g = Graph::<f64>::new();
            let fwd: Vec<DiagGaussian> = experts.iter().map(|(m, v)| expert(&mut g, m, v)).collect();
            let rev: Vec<DiagGaussian> = fwd.iter().rev().copied().collect();
            let a = poe_combine(&mut g, &fwd, &[1, 2]).unwrap();
            let b = poe_combine(&mut g, &rev, &[1, 2]).unwrap();
            for (x, y) in g.value(a.mean).data().iter().zip(g.value(b.mean).data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (i, lv) in g.value(a.log_var).data().iter().enumerate() {
                let lb = g.value(b.log_var).data()[i];
                prop_assert!((lv - lb).abs() < 1e-12);
                let smallest = experts.iter().map(|(_, v)| v[i]).fold(1.0f64, f64::min);
                prop_assert!(lv.exp() < smallest);
            }
        }
    }
}

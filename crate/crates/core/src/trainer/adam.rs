use crate::numerics::{ParamStore, Scalar, Tensor};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same = |a: &[Tensor<S>], b: &[Tensor<S>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.shape() == y.shape()
                        && x.data().iter().zip(y.data()).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                })
        };
        self.t == other.t && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// Bias-corrected Adam update from the gradients held in `store`. Every
/// gradient is checked before any value changes.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<(), TrainError> {
    if state.m.len() != store.len() {
        return Err(TrainError::Config(format!(
            "optimizer holds {} buffers for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() {
            return Err(TrainError::Config(format!("optimizer buffer shape mismatch for `{}`", p.name)));
        }
        if !p.grad.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = BETA1 * m[k].as_f64() + (1.0 - BETA1) * gk;
            let vk = BETA2 * v[k].as_f64() + (1.0 - BETA2) * gk * gk;
            m[k] = S::from_f64_lossy(mk);
            v[k] = S::from_f64_lossy(vk);
            let step = lr * (mk / c1) / ((vk / c2).sqrt() + EPSILON);
            *w = S::from_f64_lossy(w.as_f64() - step);
        }
    }
    Ok(())
}

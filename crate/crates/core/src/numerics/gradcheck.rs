//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Relative tolerance applied to entries whose gradient magnitude
    /// exceeds `abs_floor / rel_tol`.
    pub rel_tol: f64,
    /// Absolute error accepted for near-zero gradients.
    pub abs_floor: f64,
    /// Entries probed per parameter; `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Seeds the choice of probed entries.
    pub seed: u64,
    /// Added to every analytic gradient before comparison. Negative control
    /// for the checker itself; keep at 0 otherwise.
    pub analytic_perturbation: f64,
    /// How many times a disagreeing entry is re-probed with a step ten times
    /// smaller. A probe straddling the kink of a piecewise-linear activation
    /// converges as the step shrinks; a wrong analytic gradient does not.
    pub refinements: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
            analytic_perturbation: 0.0,
            refinements: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    /// Largest `|a − n| / max(|a|, |n|, abs_floor / rel_tol)` over the probed entries.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.rel_tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients of a scalar function of the parameters with
/// central differences. `f` must rebuild its graph from the store it is
/// given and must be deterministic (all noise frozen).
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &mut ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var), E>,
    E: From<NumericsError>,
{
    let (graph, loss) = f(params)?;
    let base = graph.value(loss).item();
    graph.backward_into(loss, params)?;
    drop(graph);

    let (g2, l2) = f(params)?;
    let repeat = g2.value(l2).item();
    if repeat.to_bits() != base.to_bits() {
        return Err(NumericsError::Contract(format!(
            "function is not deterministic: {base} then {repeat}"
        ))
        .into());
    }
    drop(g2);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let (g, l) = f(store)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let floor = cfg.abs_floor / cfg.rel_tol;
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = params.get(id).value.numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            entries_checked: entries.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &j in &entries {
            let original = params.get(id).value.data()[j];
            let analytic = params.get(id).grad.data()[j] + cfg.analytic_perturbation;
            let mut step = cfg.eps;
            let (mut numeric, mut err) = (0.0, f64::INFINITY);
            for _ in 0..=cfg.refinements {
                params.get_mut(id).value.data_mut()[j] = original + step;
                let up = eval(params)?;
                params.get_mut(id).value.data_mut()[j] = original - step;
                let down = eval(params)?;
                params.get_mut(id).value.data_mut()[j] = original;
                numeric = (up - down) / (2.0 * step);
                err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
                if err <= cfg.rel_tol {
                    break;
                }
                step /= 10.0;
            }
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = j;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        params: out,
        rel_tol: cfg.rel_tol,
    })
}

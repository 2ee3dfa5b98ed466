//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked fully.
    pub coords_per_param: usize,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero compare on an absolute scale.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, tol: 1e-4, coords_per_param: 8, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn params_checked(&self) -> Vec<String> {
        let mut names: Vec<String> = self.checks.iter().map(|c| c.param.clone()).collect();
        names.dedup();
        names
    }
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences on sampled coordinates of every parameter in `params`.
///
/// `loss_fn` must be deterministic: dropout off or seeded identically on
/// every call.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    loss_fn: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (loss, grads) = loss_fn(store)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    for &id in params {
        let n = store.value(id).numel();
        let name = store.get(id).name.clone();
        let mut coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        coords.sort_unstable();
        for j in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g[j]);
            let orig = store.value(id).data[j];
            store.value_mut(id).data[j] = orig + cfg.eps;
            let plus = loss_fn(store)?.0;
            store.value_mut(id).data[j] = orig - cfg.eps;
            let minus = loss_fn(store)?.0;
            store.value_mut(id).data[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss perturbing {name}[{j}]")));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            checks.push(CoordCheck {
                param: name.clone(),
                index: j,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric, cfg.abs_floor),
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { checks, max_rel_error, tol: cfg.tol, passed: max_rel_error < cfg.tol })
}

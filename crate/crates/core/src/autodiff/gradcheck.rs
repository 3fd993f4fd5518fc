//! Central finite-difference certification of analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tol_rel: 1e-4,
            tol_abs: 1e-6,
            samples_per_param: 32,
            seed: 0x6ea3,
        }
    }
}

impl GradCheckConfig {
    /// Relative tolerance `tol`, absolute tolerance two orders tighter.
    pub fn with_tolerance(tol: f64) -> Self {
        GradCheckConfig {
            tol_rel: tol,
            tol_abs: tol * 1e-2,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(op: &str, max_rel_error: f64, max_abs_error: f64, checked: usize, cfg: &GradCheckConfig) -> Self {
        GradCheckReport {
            op: op.to_string(),
            max_rel_error,
            max_abs_error,
            checked,
            tol_rel: cfg.tol_rel,
            tol_abs: cfg.tol_abs,
            pass: max_rel_error <= cfg.tol_rel || max_abs_error <= cfg.tol_abs,
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>5} coords  max_rel {:>10.3e}  max_abs {:>10.3e}  {}",
            self.op,
            self.checked,
            self.max_rel_error,
            self.max_abs_error,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with `0/0` treated as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `(f(x+h) - f(x-h)) / 2h` for a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Compares the tape gradient of `loss` with central differences for a
/// seeded sample of coordinates of every parameter in `store`.
///
/// `loss` builds a scalar on a fresh graph from the current parameter values
/// and must be deterministic.
pub fn finite_diff_check<F>(name: &str, loss: F, store: &mut ParamStore<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    assert!(cfg.step > 0.0, "finite-difference step must be positive");
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out)?.accumulate_into(store)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let len = store.shape(id).len();
        let coords: Vec<usize> = if len <= cfg.samples_per_param {
            (0..len).collect()
        } else {
            let mut picked = index::sample(&mut rng, len, cfg.samples_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in coords {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + cfg.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original - cfg.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = store.grad(id).data()[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
            checked += 1;
        }
    }
    Ok(GradCheckReport::new(name, max_rel, max_abs, checked, cfg))
}

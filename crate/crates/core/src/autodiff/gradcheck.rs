use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::Real;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, per unit of loss magnitude
    /// (at least 1), so gradients at the finite-difference rounding level
    /// compare by absolute error.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// False when two evaluations at the same point disagreed.
    pub deterministic: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.deterministic && self.max_rel_error() <= tolerance
    }
}

/// Compares reverse-mode gradients of `loss` against central finite
/// differences, parameter by parameter.
pub fn grad_check<T, F>(store: &ParamStore<T>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let l = loss(&mut g)?;
        Ok(g.scalar(l).f64())
    };

    let (base, grads) = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        (g.scalar(l).f64(), g.backward(l)?)
    };
    let deterministic = eval(store)? == base;
    let floor = opts.floor * base.abs().max(1.0);

    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let analytic = grads.param(id);
        let mut check = ParamCheck { name: store.name(id).into(), checked: 0, max_rel_error: 0.0, max_abs_error: 0.0 };
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + T::of(opts.step);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - T::of(opts.step);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g[k].f64());
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, deterministic })
}

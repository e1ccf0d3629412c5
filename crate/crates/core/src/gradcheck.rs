//! Central finite-difference gradient checks.
//!
//! An element passes when `|analytic − numeric| ≤ ABS_FLOOR` or when the
//! relative error `|a − n| / max(|a|, |n|)` is below the caller's tolerance.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest-error element as `(label, analytic, numeric)`.
    pub worst: Option<(String, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let abs = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(abs);
        let rel = if abs <= ABS_FLOOR {
            0.0
        } else {
            abs / analytic.abs().max(numeric.abs())
        };
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((label(), analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Checks `f` with respect to every element of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            report.record(|| format!("input{ti}[{j}]"), analytic[ti][j], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks a parameterized loss with respect to the listed `(parameter, element)`
/// coordinates.
pub fn check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    f: F,
) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;

    let mut probe = store.clone();
    let mut report = GradReport::default();
    for &(id, j) in coords {
        let analytic = grads.param(id).map_or(0.0, |g| g[j]);
        let orig = store.get(id).data()[j];
        probe.get_mut(id).data_mut()[j] = orig + eps;
        let up = {
            let t = Tape::inference();
            f(&t, &probe)?.item()
        };
        probe.get_mut(id).data_mut()[j] = orig - eps;
        let down = {
            let t = Tape::inference();
            f(&t, &probe)?.item()
        };
        probe.get_mut(id).data_mut()[j] = orig;
        report.record(
            || format!("{}[{j}]", store.name(id)),
            analytic,
            (up - down) / (2.0 * eps),
        );
    }
    Ok(report)
}

/// Every element of every parameter.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |j| (id, j)))
        .collect()
}

/// Up to `per_param` evenly spaced elements of every parameter.
pub fn sampled_coords(store: &ParamStore, per_param: usize) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, _, t)| {
            let n = t.numel();
            let take = per_param.min(n).max(1);
            (0..take).map(move |i| (id, i * n / take))
        })
        .collect()
}

//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the reverse-mode path it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, location: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(Mismatch {
                location: location(),
                analytic,
                numeric,
            });
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Checks d f / d inputs for a function of plain tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        for j in 0..inputs[ii].len() {
            let orig = work[ii].data()[j];
            work[ii].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[ii].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(*v).map_or(0.0, |t| t.data()[j]);
            report.record(|| format!("input {ii}[{j}]"), analytic, numeric);
        }
    }
    Ok(report)
}

/// Checks d f / d parameters for every parameter whose name starts with one
/// of `prefixes` (all parameters if `prefixes` is empty).
pub fn check_params<F>(
    store: &ParamStore,
    prefixes: &[&str],
    train: bool,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut cx = Ctx::new(store, train);
        let out = f(&mut cx)?;
        Ok(cx.g.value(out).item())
    };
    let mut cx = Ctx::new(store, train);
    let out = f(&mut cx)?;
    let grads = cx.g.backward(out)?;

    let names: Vec<String> = store
        .params
        .keys()
        .filter(|k| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
        .cloned()
        .collect();
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let n = store.params[&name].len();
        for j in 0..n {
            let orig = store.params[&name].data()[j];
            work.params.get_mut(&name).unwrap().data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.params.get_mut(&name).unwrap().data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.params.get_mut(&name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.param(&name).map_or(0.0, |t| t.data()[j]);
            report.record(|| format!("{name}[{j}]"), analytic, numeric);
        }
    }
    Ok(report)
}

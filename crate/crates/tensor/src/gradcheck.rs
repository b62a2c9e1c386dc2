//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "checked {} entries, max rel err {:.3e}", self.checked, self.max_rel_err)?;
        for fail in self.failures.iter().take(5) {
            write!(
                f,
                "\n  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                fail.param, fail.index, fail.analytic, fail.numeric, fail.rel_err
            )?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n  ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<Var<'g>>,
{
    let graph = Graph::new(Precision::Double);
    let loss = f(&graph, store)?;
    let v = loss.item();
    if !v.is_finite() {
        return Err(TensorError::Evaluation(format!("non-finite loss {v}")));
    }
    Ok(v)
}

fn sample_indices(numel: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < numel => (0..cap).map(|i| i * numel / cap).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compare the analytic gradient of the scalar `f` against central
/// differences for every trainable entry of `store`.
///
/// Each entry passes when `|analytic − numeric| / max(1, |numeric|) ≤ tol`.
/// Evaluation always runs in double precision; `store` is restored on return.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &'g ParamStore) -> Result<Var<'g>>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(TensorError::Argument(format!(
            "grad_check: eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let analytic: Vec<(String, Vec<f64>)> = {
        let graph = Graph::new(Precision::Double);
        let loss = f(&graph, store)?;
        if !loss.item().is_finite() {
            return Err(TensorError::Evaluation(format!("non-finite loss {}", loss.item())));
        }
        let grads = graph.backward(loss)?;
        store
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| {
                let g = grads
                    .param(&p.name)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()]);
                (p.name.clone(), g)
            })
            .collect()
    };

    let mut report = GradCheckReport::default();
    for (name, grad) in analytic {
        for idx in sample_indices(grad.len(), opts.max_entries_per_param) {
            let orig = store.value(&name)?.data()[idx];
            store.value_mut(&name)?.data_mut()[idx] = orig + opts.eps;
            let plus = eval(store, &f);
            store.value_mut(&name)?.data_mut()[idx] = orig - opts.eps;
            let minus = eval(store, &f);
            store.value_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let rel_err = (grad[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err > opts.tol || !rel_err.is_finite() {
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    index: idx,
                    analytic: grad[idx],
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    pub tol: f64,
    /// Added to `|g_fd|` in the relative-error denominator, so gradients far
    /// below it are compared in absolute terms (`tol·floor`).
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    /// Set when the check could not run to completion (non-finite values).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.checked() > 0 && self.max_rel_err() < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(why) = &self.failure {
            return write!(f, "FAIL ({why})");
        }
        let worst = self
            .params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
        write!(
            f,
            "{} max_rel_err={:.3e} checked={}",
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_err(),
            self.checked()
        )?;
        if let Some(w) = worst {
            write!(f, " worst={}[{}]", w.name, w.worst_index)?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient of `f` against central differences for
/// every scalar of every parameter marked `requires_grad`.
///
/// `f` must be deterministic. A coordinate is skipped when either perturbed
/// evaluation changes the graph fingerprint, i.e. crosses a relu kink, flips
/// an abs sign, or changes a gather index set.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut store = params.clone();
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::tracking();
        let bound = store.bind(&mut g);
        let loss = f(&mut g, &bound)?;
        Ok((g.value(loss).data()[0], g.fingerprint()))
    };

    let mut g = Graph::tracking();
    let bound = store.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    let base_fp = g.fingerprint();
    let mut report = GradCheckReport {
        params: Vec::new(),
        tol: cfg.tol,
        failure: None,
    };
    if !g.value(loss).is_finite() {
        report.failure = Some("non-finite loss".into());
        return Ok(report);
    }
    let grads = g.backward(loss)?;

    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let var = bound.get(&name)?;
        let n = store.get(&name)?.numel();
        let analytic = grads
            .get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        if let Some(i) = analytic.iter().position(|x| !x.is_finite()) {
            report.failure = Some(format!("non-finite gradient at {name}[{i}]"));
            return Ok(report);
        }
        let mut pr = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            checked: 0,
            skipped: 0,
        };
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + cfg.step;
            let (plus, fp_plus) = eval(&store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - cfg.step;
            let (minus, fp_minus) = eval(&store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            if fp_plus != base_fp || fp_minus != base_fp {
                pr.skipped += 1;
                continue;
            }
            if !plus.is_finite() || !minus.is_finite() {
                report.failure = Some(format!("non-finite loss perturbing {name}[{i}]"));
                return Ok(report);
            }
            let fd = (plus - minus) / (2.0 * cfg.step);
            let err = (analytic[i] - fd).abs() / (fd.abs() + cfg.floor);
            pr.checked += 1;
            if err > pr.max_rel_err {
                pr.max_rel_err = err;
                pr.worst_index = i;
            }
        }
        report.params.push(pr);
    }
    Ok(report)
}

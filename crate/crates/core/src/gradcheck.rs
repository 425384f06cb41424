//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{GradBuffer, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare the analytic gradient of the scalar built by `f` with
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar in `params`.
///
/// The error per entry is `|analytic − numeric| / max(|analytic|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut analytic = GradBuffer::zeros_like(params);
    g.backward_into(root, 1.0, &mut analytic)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..params.len() {
        let id = ParamId(p);
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id)[j];
            let err = (a - numeric).abs() / a.abs().max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

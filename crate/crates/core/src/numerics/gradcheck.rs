//! Central finite-difference oracle for reverse-mode gradients.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Added to the denominator of the relative error so that gradients that are
/// zero analytically compare against finite-difference noise in absolute
/// terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_frozen: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + REL_ERR_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Oracle(format!("objective has shape {:?}, expected a scalar", v.shape())));
    }
    Ok(v.item())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `step`, for every scalar of every listed parameter.
/// Frozen parameters are skipped (and must receive no tape gradient).
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Oracle(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base = g.value(out).item();
    g.backward(out)?;
    let grads = g.param_grads();

    let again = eval(store, &mut f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped_frozen: 0,
    };
    for &id in params {
        if store.get(id).frozen {
            if grads.get(id).is_some() {
                return Err(Error::Oracle(format!(
                    "frozen parameter `{}` received a gradient",
                    store.get(id).name
                )));
            }
            report.skipped_frozen += 1;
            continue;
        }
        let n = store.value(id).len();
        for k in 0..n {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + step;
            let plus = eval(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig - step;
            let minus = eval(store, &mut f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if !(e <= report.max_rel_err) {
                report.max_rel_err = e;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

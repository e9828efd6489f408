//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{GradMap, ModelParams, ModuleTag};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub tag: ModuleTag,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates of frozen parameters, which carry no analytic gradient.
    pub skipped: usize,
    pub per_param: Vec<ParamCheck>,
}

/// `|a - c| / max(1e-12, |a| + |c|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Every coordinate of every trainable parameter is perturbed by `±eps`.
/// Frozen parameters are skipped and counted in `skipped`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ModelParams,
    analytic: &GradMap,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        per_param: Vec::new(),
    };
    for (idx, p) in params.iter().enumerate() {
        let n = p.value.numel();
        if p.frozen {
            if analytic.get(idx).is_some() {
                return Err(Error::FreezeViolation {
                    name: p.name.clone(),
                });
            }
            report.skipped += n;
            continue;
        }
        let grad = analytic.get(idx).ok_or_else(|| {
            Error::Contract(format!("no analytic gradient for trainable `{}`", p.name))
        })?;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = p.value.data()[i];
            work.by_index_mut(idx).value.data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.by_index_mut(idx).value.data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.by_index_mut(idx).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        report.checked += n;
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push(ParamCheck {
            name: p.name.clone(),
            tag: p.tag,
            coords: n,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

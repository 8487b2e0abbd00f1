//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::param::Parameterized;
use super::tape::Gradients;
use crate::error::Result;

/// Per-group outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    /// `None` when the analytic pass produced no gradient for this group.
    pub max_rel_error: Option<f64>,
    pub entries: usize,
    /// Entries re-measured with the fine step because the coarse step
    /// disagreed with the analytic value.
    pub remeasured: usize,
}

impl GroupCheck {
    pub fn has_gradient_path(&self) -> bool {
        self.max_rel_error.is_some()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_none_or(|e| e < tol)
    }
}

/// Smallest magnitude used as the denominator of [`relative_error`]. A
/// central difference with step 1e-5 on an order-one loss carries about
/// 1e-11 of rounding noise, so smaller gradients cannot be resolved to 1e-4.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Ratio between the coarse step and the step used to re-measure entries
/// that fail at the coarse step.
pub const FINE_STEP_RATIO: f64 = 100.0;

/// Relative error with denominator `max(|analytic|, |numeric|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` gradients against `(f(θ+h) − f(θ−h)) / 2h` for every
/// entry of every parameter group of `model`.
///
/// An entry whose error reaches `tol` at step `h` is measured again at
/// `h / FINE_STEP_RATIO` and keeps the smaller error: a piecewise-linear
/// activation whose kink lies within `h` of the current point biases the
/// coarse difference, while a wrong analytic value fails at both steps.
///
/// `loss` must be a deterministic function of the parameter values. Groups
/// missing from `analytic` are reported without an error value; their
/// numeric derivative is still evaluated and must be zero for the check to
/// be meaningful, which callers can assert via [`numeric_gradient`].
pub fn grad_check<M, F>(model: &mut M, analytic: &Gradients, step: f64, tol: f64, mut loss: F) -> Result<Vec<GroupCheck>>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let entries = model.params()[gi].value.data().len();
        let Some(grad) = analytic.get(name) else {
            out.push(GroupCheck {
                name: name.clone(),
                max_rel_error: None,
                entries,
                remeasured: 0,
            });
            continue;
        };
        let mut worst = 0.0f64;
        let mut remeasured = 0;
        for e in 0..entries {
            let a = grad.data()[e];
            let mut err = relative_error(a, central_difference(model, gi, e, step, &mut loss)?);
            if err >= tol {
                remeasured += 1;
                let fine = central_difference(model, gi, e, step / FINE_STEP_RATIO, &mut loss)?;
                err = err.min(relative_error(a, fine));
            }
            worst = worst.max(err);
        }
        out.push(GroupCheck {
            name: name.clone(),
            max_rel_error: Some(worst),
            entries,
            remeasured,
        });
    }
    Ok(out)
}

/// Full numeric gradient of one group, in row-major order.
pub fn numeric_gradient<M, F>(model: &mut M, name: &str, step: f64, mut loss: F) -> Result<Option<Vec<f64>>>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let Some(gi) = model.params().iter().position(|p| p.name == name) else {
        return Ok(None);
    };
    let entries = model.params()[gi].value.data().len();
    (0..entries)
        .map(|e| central_difference(model, gi, e, step, &mut loss))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn central_difference<M, F>(model: &mut M, group: usize, entry: usize, step: f64, loss: &mut F) -> Result<f64>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let original = model.params()[group].value.data()[entry];
    model.params_mut()[group].value.data_mut()[entry] = original + step;
    let plus = loss(model);
    model.params_mut()[group].value.data_mut()[entry] = original - step;
    let minus = loss(model);
    model.params_mut()[group].value.data_mut()[entry] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

//! Central-difference gradient checking against analytic backward passes.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore};

/// Denominator floor for relative errors near zero gradients.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A deterministic scalar loss over the parameters in a store.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;

    /// Zeroes the gradient slots, accumulates analytic gradients into them and returns the loss.
    fn loss_and_grad(&self, params: &mut ParamStore) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub h: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks every coordinate of every parameter in `params`.
pub fn check_gradients<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = params.ids().collect();
    check_gradients_for(objective, params, &ids, h, tol)
}

/// Checks the listed parameters only. Parameter values are restored afterwards.
pub fn check_gradients_for<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::config(format!("perturbation size must be > 0, got {h}")));
    }
    let base = objective.loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {base}")));
    }
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            params
                .grad(id)
                .map(|g| g.as_slice().to_vec())
                .ok_or_else(|| Error::State(format!("no gradient for `{}`", params.name(id))))
        })
        .collect::<Result<_>>()?;

    let mut checks = Vec::with_capacity(ids.len());
    for (&id, grads) in ids.iter().zip(&analytic) {
        let mut worst = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, &a) in grads.iter().enumerate() {
            let original = params.value(id).as_slice()[k];
            params.value_mut(id).as_mut_slice()[k] = original + h;
            let plus = objective.loss(params);
            params.value_mut(id).as_mut_slice()[k] = original - h;
            let minus = objective.loss(params);
            params.value_mut(id).as_mut_slice()[k] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing `{}`[{k}]",
                    worst.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || k == 0 {
                worst.max_rel_error = err;
                worst.worst_index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        checks.push(worst);
    }
    let pass = checks.iter().all(|c| c.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: checks,
        h,
        tol,
        pass,
    })
}

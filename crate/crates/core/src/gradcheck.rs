//! Central-difference verification of tape gradients.
//!
//! Checks run in f64: the forward program is re-evaluated at p ± eps for
//! every parameter entry and compared against the gradient the tape reports.

use crate::tape::{BoundParams, ParamSet, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub pass: bool,
    pub tol: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.worst {
            Some((name, idx)) => write!(
                f,
                "{}: max rel err {:.3e} at {name}[{idx}] over {} entries (tol {:.1e})",
                if self.pass { "pass" } else { "FAIL" },
                self.max_rel_err,
                self.entries_checked,
                self.tol
            ),
            None => write!(f, "pass: no trainable entries"),
        }
    }
}

/// Relative error with a unit floor, so sub-unit gradients are compared
/// absolutely and larger ones relatively.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Verify the tape gradient of `f` against central differences for every
/// trainable parameter entry.
///
/// `f` must build a scalar loss from the bound parameters; it is invoked
/// once per perturbed entry, so keep the forward program small.
pub fn grad_check<Builder>(
    params: &mut ParamSet<f64>,
    eps: f64,
    tol: f64,
    mut f: Builder,
) -> Result<GradCheckReport>
where
    Builder: FnMut(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let eval = |params: &ParamSet<f64>, f: &mut Builder| -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    params.zero_grads();
    params.accumulate_grads(&bound, &mut grads);

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut entries = 0usize;
    for id in ids {
        let name = params.get(id).name.clone();
        let n = params.value(id).len();
        for i in 0..n {
            let base = params.value(id).data()[i];
            let analytic = params.get(id).grad.data()[i];

            let bump = |delta: f64, params: &mut ParamSet<f64>| {
                let mut v = params.value(id).to_vec();
                v[i] = base + delta;
                let t = Tensor::new(params.value(id).shape().to_vec(), v).expect("same shape");
                params.set_value(id, t);
            };
            bump(eps, params);
            let plus = eval(params, &mut f).map_err(|e| {
                Error::NonFinite(format!("at {name}[{i}]+eps: {e}"))
            })?;
            bump(-eps, params);
            let minus = eval(params, &mut f).map_err(|e| {
                Error::NonFinite(format!("at {name}[{i}]-eps: {e}"))
            })?;
            bump(0.0, params);

            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic, numeric);
            entries += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((name.clone(), i));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        entries_checked: entries,
        pass: max_rel_err <= tol,
        tol,
    })
}

pub const DEFAULT_EPS: f64 = 1e-5;

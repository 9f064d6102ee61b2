//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error floor: `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    /// Set when the function could not be evaluated or produced non-finite values.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        if self.failure.is_some() {
            return f64::INFINITY;
        }
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error() < tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "evaluation failed: {msg}");
        }
        match self.worst() {
            Some(w) => write!(
                f,
                "max rel err {:.3e} at {}[{}] (analytic {:.9e}, numeric {:.9e})",
                w.max_rel_error, w.name, w.worst_index, w.analytic, w.numeric
            ),
            None => write!(f, "no parameters checked"),
        }
    }
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    tape.value(out).item()
}

/// Compare tape gradients of the scalar `f` against central differences
/// for every coordinate of `params`. `f` must be deterministic: stochastic
/// layers have to run with fixed noise.
pub fn gradcheck<F>(store: &mut ParamStore, params: &[ParamId], f: F, step: f64) -> GradcheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut report = GradcheckReport::default();
    let analytic_pass = (|| -> Result<()> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)
    })();
    if let Err(e) = analytic_pass {
        report.failure = Some(e.to_string());
        return report;
    }
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|&id| store.get(id).grad.data().to_vec()).collect();

    for (&id, grad) in params.iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = eval_scalar(&f, store);
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = eval_scalar(&f, store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(format!("{}[{i}]: {e}", check.name));
                    report.checks.push(check);
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                report.failure =
                    Some(format!("{}[{i}]: non-finite gradient (analytic {a}, numeric {numeric})", check.name));
                report.checks.push(check);
                return report;
            }
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.checks.push(check);
    }
    report
}

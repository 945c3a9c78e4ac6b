//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so gradients that are zero up to
/// round-off do not register as large relative mismatches.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1.0 simulates a broken backward pass.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamStatus {
    Checked { max_rel_error: f64, max_abs_grad: f64 },
    /// `requires_grad == false`.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub status: ParamStatus,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| match p.status {
                ParamStatus::Checked { max_rel_error, .. } => Some(max_rel_error),
                ParamStatus::Skipped => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn status(&self, name: &str) -> Option<&ParamStatus> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.status)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<56} {:>7} {:>12} {:>12}", "parameter", "numel", "max_rel_err", "max|grad|")?;
        for p in &self.params {
            match p.status {
                ParamStatus::Checked { max_rel_error, max_abs_grad } => writeln!(
                    f,
                    "{:<56} {:>7} {:>12.3e} {:>12.3e}",
                    p.name, p.numel, max_rel_error, max_abs_grad
                )?,
                ParamStatus::Skipped => writeln!(f, "{:<56} {:>7} {:>12} {:>12}", p.name, p.numel, "skipped", "-")?,
            }
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, element by element, for every trainable parameter.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_params()
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (pid, (name, grad)) in analytic.iter().enumerate() {
        let numel = grad.len();
        if !store.by_id(pid).requires_grad {
            params.push(ParamCheck {
                name: name.to_string(),
                numel,
                status: ParamStatus::Skipped,
            });
            continue;
        }
        let mut max_rel_error: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        for k in 0..numel {
            let orig = store.by_id(pid).value.data()[k];
            probe.by_id_mut(pid).value.data_mut()[k] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.by_id_mut(pid).value.data_mut()[k] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.by_id_mut(pid).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[k] * opts.analytic_scale;
            max_rel_error = max_rel_error.max(relative_error(a, numeric));
            max_abs_grad = max_abs_grad.max(a.abs());
        }
        params.push(ParamCheck {
            name: name.to_string(),
            numel,
            status: ParamStatus::Checked {
                max_rel_error,
                max_abs_grad,
            },
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
    })
}

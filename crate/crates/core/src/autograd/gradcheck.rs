//! Central-difference gradient checking.

use super::params::Params;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor for the relative error, so components whose true
    /// gradient is zero compare by absolute difference.
    pub abs_floor: f64,
    /// Re-evaluate perturbed points on the same ReLU/max piece as the base
    /// point. Without this a perturbation may cross a kink and the finite
    /// difference no longer estimates the derivative at the base point.
    pub freeze_decisions: bool,
    /// Without frozen decisions: return at the first kink crossing, for
    /// callers that discard such points anyway.
    pub stop_at_kink: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-6,
            freeze_decisions: true,
            stop_at_kink: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub components: usize,
    /// Perturbed evaluations that took a different ReLU/max piece than the
    /// base point. Always 0 when decisions are frozen.
    pub kink_crossings: usize,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of a scalar function of `params` against
/// central differences, component by component.
///
/// `f` must build the same graph structure for every parameter value.
pub fn grad_check<T, F>(params: &Params<T>, options: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'a> Fn(&mut Tape<'a, T>, &'a Params<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let mut analytic = params.zeros_like();
    tape.backward_into(loss, &mut analytic)?;
    let log = tape.decisions();
    drop(tape);

    let eval = |p: &Params<T>| -> Result<(f64, bool)> {
        let mut t = if options.freeze_decisions {
            Tape::replaying(log.clone())
        } else {
            Tape::new()
        };
        let l = f(&mut t, p)?;
        let v = t.value(l).item().as_f64();
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value during gradient check"));
        }
        Ok((v, !options.freeze_decisions && t.decisions() != log))
    };

    let h = T::from_f64_lossy(options.step);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        components: 0,
        kink_crossings: 0,
    };
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let base = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = base + h;
            let (plus, crossed_up) = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = base - h;
            let (minus, crossed_down) = eval(&probe)?;
            report.kink_crossings += usize::from(crossed_up) + usize::from(crossed_down);
            if options.stop_at_kink && report.kink_crossings > 0 {
                return Ok(report);
            }
            probe.get_mut(id).data_mut()[i] = base;
            let step = (base + h).as_f64() - (base - h).as_f64();
            let numeric = (plus - minus) / step;
            let a = analytic.get(id).data()[i].as_f64();
            let err = relative_error(a, numeric, options.abs_floor);
            report.components += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] for a function of a single tensor.
pub fn grad_check_point<T, F>(point: &Tensor<T>, step: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'a> Fn(&mut Tape<'a, T>, Var) -> Result<Var>,
{
    let mut params = Params::new();
    let id = params.insert("x", point.clone())?;
    let options = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    grad_check(&params, options, |tape, p| {
        let x = tape.param(id, p.get(id));
        f(tape, x)
    })
}

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, REL_FLOOR)` over all coordinates.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Coordinates whose ±eps probes changed a relu/max/clamp branch.
    pub kink_crossings: usize,
    /// Smallest kink margin seen at the unperturbed point.
    pub min_kink_margin: f64,
    pub coordinates: usize,
}

/// Denominator floor of the relative error. Central differences carry
/// roundoff of about `|f| * 1e-16 / eps`, i.e. 1e-10 for eps 1e-5, so
/// gradient entries much below 1e-6 cannot be resolved to 1e-4 relative.
pub const REL_FLOOR: f64 = 1e-6;

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::with_kink_tracking();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_scalar() {
        return Err(Error::Contract("grad_check program must return a scalar".into()));
    }
    Ok((out.item(), tape.kink_stats().fingerprint))
}

/// Checks every coordinate of every input against
/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::with_kink_tracking();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    let base = tape.kink_stats();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        kink_crossings: 0,
        min_kink_margin: base.min_margin,
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let (plus, fp_plus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let (minus, fp_minus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;

            if fp_plus != base.fingerprint || fp_minus != base.fingerprint {
                report.kink_crossings += 1;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j));
                report.worst_values = (a, numeric);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Worst relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(grad_check_report(f, inputs, eps)?.max_rel_error)
}

//! Central finite-difference verification of tape gradients.

use crate::array::Array;
use crate::error::Result;
use crate::tape::{Tape, Var};

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    /// Set when a gradient was non-finite; names the parameter and element.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(params: &[Array], build: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares the tape gradient of `build`'s scalar output against central
/// differences with step `step` for every element of every parameter.
///
/// `build` receives the parameters as tape leaves and must be deterministic.
pub fn grad_check<F>(params: &[Array], tolerance: f64, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(params, &build)?;
    tape.backward(loss)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Array::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut report = GradCheckReport {
        tolerance,
        step,
        params: Vec::with_capacity(params.len()),
        failure: None,
    };
    let mut probe: Vec<Array> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for ei in 0..grad.len() {
            let original = probe[pi].as_slice()[ei];
            probe[pi].as_mut_slice()[ei] = original + step;
            let plus = loss_value(&probe, &build)?;
            probe[pi].as_mut_slice()[ei] = original - step;
            let minus = loss_value(&probe, &build)?;
            probe[pi].as_mut_slice()[ei] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_slice()[ei];
            if !a.is_finite() || !numeric.is_finite() {
                report.failure = Some(format!(
                    "parameter {pi} element {ei}: analytic {a}, numeric {numeric}"
                ));
                report.params.push(check);
                return Ok(report);
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error {
                check = ParamCheck {
                    index: pi,
                    max_rel_error: err,
                    worst_element: ei,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

fn loss_value<F>(params: &[Array], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(params, build)?;
    Ok(tape.value(loss).as_slice()[0])
}

//! Central finite-difference gradient verification.

use crate::error::{Error, Result};

use super::array::Array;
use super::tape::{Tape, Var};

/// Gradients smaller than this in magnitude are compared absolutely, not
/// relatively; below it the finite-difference round-off dominates.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst disagreement between analytic and numeric gradients for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares [`Tape::backward`] against central differences of `f` for every
/// element of every input.
///
/// `f` receives a fresh tape plus one leaf per input and must return a scalar
/// loss. `make_tape` lets callers install backward faults.
pub fn check_with<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    inputs: &[Array],
    h: f64,
) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape
            .value(loss)
            .item()
            .ok_or_else(|| Error::dim("gradcheck", tape.shape(loss), &[]))?;
        if !v.is_finite() {
            return Err(Error::Diagnostic("non-finite loss".into()));
        }
        Ok(v)
    };

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Array> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut worst = InputCheck {
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_relative_error {
                worst = InputCheck {
                    max_relative_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        out.push(worst);
    }
    Ok(out)
}

pub fn check<F>(f: F, inputs: &[Array], h: f64) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(Tape::new, f, inputs, h)
}

//! Finite-difference gradient verification.
//!
//! [`check`] rebuilds a computation from scratch for every perturbed input
//! coordinate (central differences), compares against the analytic gradients
//! produced by [`Tape::backward`], and reports the worst relative error:
//! `|a - n| / max(1, |a|, |n|)`.

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorId};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    /// Loss value at the unperturbed inputs.
    pub value: f64,
    /// Worst relative error over all input coordinates.
    pub max_rel_err: f64,
    /// `(input index, coordinate)` attaining `max_rel_err`.
    pub worst_coord: (usize, usize),
    /// Analytic gradients per input, flattened.
    pub analytic: Vec<Vec<f64>>,
    /// Numeric gradients per input, flattened.
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckSummary {
    /// True if the worst relative error is within `tol`.
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor of 1, matching the tolerance
/// convention used throughout the test suite.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Checks analytic gradients of a scalar-valued computation.
///
/// `build` receives a fresh tape plus leaves created from `inputs` (all with
/// gradients enabled, in order) and must return the scalar loss. It is called
/// `1 + 2 * total_coordinates` times; keep the inputs small.
pub fn check<S, F>(
    inputs: &[(Vec<S>, Vec<usize>)],
    step: f64,
    build: F,
) -> Result<GradCheckSummary, TensorError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let eval = |data: &[Vec<S>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(data)
            .map(|((_, shape), values)| tape.leaf(values.clone(), shape.clone(), true))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value_scalar(loss).to_f64c())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let base: Vec<Vec<S>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(values, shape)| tape.leaf(values.clone(), shape.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    let value = tape.value_scalar(loss).to_f64c();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (v, _))| match tape.grad(id) {
            Some(g) => g.iter().map(|&x| x.to_f64c()).collect(),
            None => vec![0.0; v.len()],
        })
        .collect();

    // Numeric pass: central differences, one coordinate at a time.
    let h = S::from_f64c(step);
    let mut numeric: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| vec![0.0; v.len()]).collect();
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = (0, 0);
    for (pi, (values, _)) in inputs.iter().enumerate() {
        for ci in 0..values.len() {
            let mut data = base.clone();
            data[pi][ci] += h;
            let up = eval(&data)?;
            data[pi][ci] = base[pi][ci] - h;
            let down = eval(&data)?;
            let n = (up - down) / (2.0 * step);
            numeric[pi][ci] = n;
            let err = relative_error(analytic[pi][ci], n);
            if err > max_rel_err {
                max_rel_err = err;
                worst_coord = (pi, ci);
            }
        }
    }

    Ok(GradCheckSummary { value, max_rel_err, worst_coord, analytic, numeric })
}

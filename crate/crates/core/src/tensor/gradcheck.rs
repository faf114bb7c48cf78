//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Added to every analytic entry before comparison. Non-zero only in
    /// negative-control runs.
    pub analytic_bias: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            analytic_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `build`'s scalar output with central
/// differences, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, build: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let root = build(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };

    let (tape, vars, root) = eval(inputs)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v).clone()).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut result = GradCheckResult {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x = input.data()[k];
            work[ti].data_mut()[k] = x + opts.eps;
            let (t_plus, _, r_plus) = eval(&work)?;
            work[ti].data_mut()[k] = x - opts.eps;
            let (t_minus, _, r_minus) = eval(&work)?;
            work[ti].data_mut()[k] = x;

            let numeric = (t_plus.scalar_value(r_plus) - t_minus.scalar_value(r_minus)) / (2.0 * opts.eps);
            let a = analytic[ti].data()[k] + opts.analytic_bias;
            let err = relative_error(a, numeric);
            result.checked += 1;
            if err > result.max_rel_err || result.worst.is_none() {
                result.max_rel_err = result.max_rel_err.max(err);
                result.worst = Some((ti, k, a, numeric));
            }
        }
    }
    result.passed = result.max_rel_err < opts.tolerance;
    Ok(result)
}

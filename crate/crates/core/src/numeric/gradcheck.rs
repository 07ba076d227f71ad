//! Central finite-difference comparison for tape-built scalar functions.

use rand::seq::index::sample;
use rand::Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Step for the central difference.
    pub eps: f64,
    /// Maximum number of coordinates compared (sampled without replacement).
    pub coords: usize,
    /// Seed of the tape generator; identical for every evaluation so
    /// dropout masks match between the analytic and numeric passes.
    pub tape_seed: u64,
    /// Magnitude below which gradients are compared absolutely.
    pub floor: f64,
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { eps: 1e-5, coords: 100, tape_seed: 0, floor: 1e-6, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn merge(&mut self, other: &CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `build(inputs)` against central differences.
///
/// `build` receives one `requires_grad` leaf per input and returns a scalar.
pub fn check<B, R>(inputs: &[Tensor<f64>], build: B, opts: &CheckOptions, rng: &mut R) -> Result<CheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<f64>], fault: Option<OpKind>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new(opts.tape_seed);
        tape.inject_fault(fault);
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = eval(inputs, opts.fault)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v).cloned().expect("leaf gradient")).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(rng, total, opts.coords.min(total)).into_vec();

    let mut report = CheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut values = inputs.to_vec();
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let orig = values[which].data()[idx];
        values[which].data_mut()[idx] = orig + opts.eps;
        let (t, _, l) = eval(&values, None)?;
        let plus = t.value(l).item();
        values[which].data_mut()[idx] = orig - opts.eps;
        let (t, _, l) = eval(&values, None)?;
        let minus = t.value(l).item();
        values[which].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[which].data()[idx];
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, opts.floor));
        report.checked += 1;
    }
    Ok(report)
}

/// Random projection loss `sum(out * weights)` used to reduce any output
/// to a scalar with a dense, non-degenerate adjoint.
pub fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

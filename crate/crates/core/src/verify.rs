//! Numerical verification helpers: central finite differences against the tape's gradients.

use rand::Rng as _;

use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms (relative error is
/// meaningless at zero).
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Uniform values in `[-scale, scale]`, deterministic in `seed`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng::indexed(seed, "verify", shape.len() as u64);
    Tensor::from_fn(shape, |_| r.random_range(-scale..=scale))
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the tape gradient of scalar `f` w.r.t. every element of every input with a
/// central finite difference.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_subset(inputs, f, |_, _| true)
}

/// Like [`check_gradients`] but only for elements where `select(input, element)` holds.
pub fn check_gradients_subset<F>(
    inputs: &[Tensor<f64>],
    f: F,
    select: impl Fn(usize, usize) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            if !select(i, j) {
                continue;
            }
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x is checked correctly...
        let x = random_tensor(&[4], 3, 1.0);
        let ok = check_gradients(&[x.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(ok.max_rel_err < 1e-6);
        // ...while a function whose forward ignores the tape is caught.
        let bad = check_gradients(&[x], |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }
}

//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly strided coordinates per input.
    pub max_coords: Option<usize>,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            step: 1e-6,
            tolerance,
            max_coords: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = tape.value(out).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    Ok(s)
}

/// Compares the tape gradient of `sum(f(inputs))` against central differences.
/// Relative error per element is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, GradCheckOptions::with_tolerance(tolerance))
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let root = tape.sum_all(out)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        let n = input.len();
        let stride = match opts.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + opts.step;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - opts.step;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            let rel = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4, 2]),
            random(&mut rng, &[2]),
        ];
        let r = grad_check(|t, v| t.linear(v[0], v[1], v[2]), &inputs, 1e-4).unwrap();
        assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn wrong_derivative_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, &[5])];
        let r = grad_check(
            |t, v| {
                let y = t.exp(v[0]);
                Ok(t.grad_scale(y, 2.0))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let inputs = vec![Tensor::vector(vec![0.0f64])];
        let r = grad_check(|t, v| Ok(t.log(v[0])), &inputs, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}

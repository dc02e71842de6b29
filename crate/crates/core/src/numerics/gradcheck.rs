use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
}

fn eval<F>(f: &F, theta: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::inference();
    let v = f(tape.leaf(theta.clone())).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` at `theta` against central differences.
///
/// Returns the worst `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over
/// every coordinate.
pub fn grad_check<F>(f: F, theta: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
{
    let all: Vec<usize> = (0..theta.len()).collect();
    Ok(grad_check_at(f, theta, &all)?.max_rel_error)
}

/// [`grad_check`] restricted to the listed coordinates, for large parameter vectors.
pub fn grad_check_at<F>(f: F, theta: &Tensor<f64>, coordinates: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(theta.clone());
    let out = f(leaf);
    if !out.item().is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {}", out.item())));
    }
    let analytic = tape.backward(out).get_or_zeros(leaf);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: 0, coordinates_checked: 0 };
    let mut probe = theta.clone();
    for &i in coordinates {
        let orig = theta.data()[i];
        let h = 1e-4 * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
        report.coordinates_checked += 1;
    }
    Ok(report)
}

/// Evenly spread sample of `count` coordinates out of `len`.
pub fn spread_coordinates(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count + (k * 7919) % (len / count).max(1)).collect()
}

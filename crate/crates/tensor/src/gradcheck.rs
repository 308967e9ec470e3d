//! Central finite-difference gradient oracle.
//!
//! The error reported per input is the infinity-norm relative error
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`.
//! The floor is `1e-3` times the largest gradient entry over all inputs (and
//! at least `1e-8`), so an input whose true gradient is zero or negligible
//! next to the others is judged against the function's gradient scale
//! rather than against finite-difference roundoff.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-8;
const GLOBAL_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], requires_grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::Usage(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every element of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|d| d.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numerics = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + opts.step;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            let fp = gp.value(op).item();
            work[k].data_mut()[e] = orig - opts.step;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            let fm = gm.value(om).item();
            work[k].data_mut()[e] = orig;
            *slot = (fp - fm) / (2.0 * opts.step);
        }
        numerics.push(numeric);
    }
    let global = analytic
        .iter()
        .chain(&numerics)
        .flatten()
        .map(|v| v.abs())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let floor = NORM_FLOOR.max(GLOBAL_FRACTION * global);
    let mut reports = Vec::with_capacity(inputs.len());
    for (an, numeric) in analytic.into_iter().zip(numerics) {
        // f64::max drops NaN, so map it to infinity first
        let max_abs_error = an
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .map(|d| if d.is_nan() { f64::INFINITY } else { d })
            .fold(0.0, f64::max);
        let scale = an.iter().chain(&numeric).map(|v| v.abs()).fold(floor, f64::max);
        let max_rel_error = if max_abs_error.is_finite() {
            max_abs_error / scale
        } else {
            f64::INFINITY
        };
        reports.push(InputReport {
            max_rel_error,
            max_abs_error,
            analytic: an,
            numeric,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        inputs: reports,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = gradcheck(
            |g, v| {
                let sq = g.square(v[0]);
                g.sum_all(sq)
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.inputs[0].analytic, vec![2.0, 4.0]);
        assert!(report.max_rel_error <= 1e-8, "{}", report.max_rel_error);
        assert!(report.passed);
    }

    #[test]
    fn nan_gradient_fails() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let report = gradcheck(
            |g, v| {
                let r = g.sqrt(v[0]);
                g.sum_all(r)
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.max_rel_error, f64::INFINITY);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(|g, v| Ok(g.square(v[0])), &[x], &GradcheckOptions::default()).unwrap_err();
        assert!(matches!(err, TensorError::Usage(_)));
    }
}

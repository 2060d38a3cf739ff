//! Central-difference gradient oracle.
//!
//! Estimates d f / d theta entry by entry as (f(theta+h) - f(theta-h)) / 2h.
//! The oracle never touches the analytic backward path it is used to check;
//! it only re-evaluates the forward objective on perturbed parameter copies.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ParamSet, ParamTensor};

/// Relative error between an analytic value and a numerical estimate:
/// |a - n| / max(|a|, |n|, 1e-8).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central difference of a scalar function of one variable.
pub fn fd_scalar<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Per-tensor finite-difference gradient estimate.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub grad: Vec<f64>,
}

/// Estimates the gradient of `f` with respect to every entry of every
/// tensor in `params`. Entries are probed independently, so the loop is
/// data-parallel; results come back in the set's fixed tensor order.
pub fn finite_difference_gradient<P, F>(params: &P, f: &F, h: f64) -> Result<Vec<FdReport>>
where
    P: ParamSet + Clone + Sync,
    F: Fn(&P) -> f64 + Sync,
{
    assert!(h > 0.0, "step must be positive");
    let shapes: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.len()))
        .collect();

    let entries: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, len))| (0..*len).map(move |ei| (ti, ei)))
        .collect();

    let probes: Vec<Result<f64>> = par::map_collect(&entries, |&(ti, ei)| {
        let mut work = params.clone();
        let base = work.tensors()[ti].value[ei];
        set_entry(&mut work, ti, ei, base + h);
        let plus = f(&work);
        set_entry(&mut work, ti, ei, base - h);
        let minus = f(&work);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleNonFinite {
                param: shapes[ti].0.clone(),
            });
        }
        Ok((plus - minus) / (2.0 * h))
    });

    let mut reports: Vec<FdReport> = shapes
        .iter()
        .map(|(name, len)| FdReport {
            name: name.clone(),
            grad: Vec::with_capacity(*len),
        })
        .collect();
    for ((ti, _), probe) in entries.into_iter().zip(probes) {
        reports[ti].grad.push(probe?);
    }
    Ok(reports)
}

fn set_entry<P: ParamSet>(params: &mut P, ti: usize, ei: usize, v: f64) {
    params.tensors_mut()[ti].value[ei] = v;
}

/// Minimal parameter set for oracle self-tests and ad hoc probes.
#[derive(Debug, Clone)]
pub struct SingleTensor(pub ParamTensor);

impl ParamSet for SingleTensor {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.0]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;

    #[test]
    fn square_function_derivative() {
        let d = fd_scalar(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let d = fd_scalar(sigmoid_scalar, 0.0, 1e-5);
        assert!((d - 0.25).abs() < 1e-8, "{d}");
    }

    #[test]
    fn paramset_gradient_of_sum_of_squares() {
        let mut t = ParamTensor::zeros("theta", 1, 3);
        t.value = vec![1.0, -2.0, 0.5];
        let set = SingleTensor(t);
        let f = |p: &SingleTensor| p.0.value.iter().map(|v| v * v).sum::<f64>();
        let reports = finite_difference_gradient(&set, &f, 1e-5).unwrap();
        assert_eq!(reports.len(), 1);
        for (g, v) in reports[0].grad.iter().zip(&set.0.value) {
            assert!(rel_err(*g, 2.0 * v) < 1e-8);
        }
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        let mut t = ParamTensor::zeros("w_bad", 1, 1);
        t.value = vec![1.0];
        let set = SingleTensor(t);
        let f = |p: &SingleTensor| (p.0.value[0] - 1.0).ln();
        let err = finite_difference_gradient(&set, &f, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w_bad"), "{err}");
    }
}

//! Central finite-difference oracle for validating analytic gradients.
//!
//! Nothing in this module calls a backward pass: it only evaluates scalar
//! functions. The per-module suites in [`suite`] pair it with the analytic
//! gradients they check.

pub mod suite;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;
pub const TOL_SMOOTH: f64 = 1e-6;
pub const TOL_DEFORM: f64 = 1e-5;
pub const TOL_LOSS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub n_checked: usize,
    pub passed: bool,
}

impl GradReport {
    /// Combines two reports over disjoint element sets. `worst_index` keeps
    /// the index within whichever report had the larger relative error.
    pub fn merge(self, other: GradReport) -> GradReport {
        let (worst, rel) = if other.max_rel_err > self.max_rel_err {
            (other.worst_index, other.max_rel_err)
        } else {
            (self.worst_index, self.max_rel_err)
        };
        GradReport {
            max_rel_err: rel,
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            worst_index: worst,
            n_checked: self.n_checked + other.n_checked,
            passed: self.passed && other.passed,
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::validation(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around element {i} (f(+h)={up}, f(-h)={down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_vec(x.dims(), grad)
}

/// Element passes when its relative error `|a - n| / max(|a|, |n|, floor)`
/// is within `rel_tol` or its absolute error within `abs_tol`.
pub fn check(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_tol: f64) -> Result<GradReport> {
    if analytic.dims() != numeric.dims() {
        return Err(Error::shape(format!(
            "analytic {:?} and numeric {:?} gradients differ in shape",
            analytic.dims(),
            numeric.dims()
        )));
    }
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        n_checked: analytic.len(),
        passed: true,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        if !(rel <= rel_tol || abs <= abs_tol) {
            report.passed = false;
        }
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.2, 0.75, -0.9]).unwrap();
        let g = fd_gradient(|t| Ok(t.sum_all()), &x, STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() <= 1e-10), "{g:?}");

        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = fd_gradient(|t| Ok(t.sq_norm()), &x, STEP).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn non_finite_evaluation_names_index() {
        // ln is finite at the base point but not one step below element 1
        let x = Tensor::from_vec(&[3], vec![1.0, 1e-6, 2.0]).unwrap();
        let err = fd_gradient(|t| Ok(t.data().iter().map(|v| v.ln()).sum()), &x, STEP).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("element 1")), "{err}");
    }

    #[test]
    fn check_examples() {
        let a = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = check(&a, &a, 1e-12, 0.0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.passed);

        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let near = Tensor::from_vec(&[1], vec![1.0001]).unwrap();
        assert!(check(&one, &near, 1e-3, 0.0).unwrap().passed);

        let far = Tensor::from_vec(&[1], vec![1.01]).unwrap();
        let r = check(&one, &far, 1e-3, 1e-6).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 0);

        assert!(check(&one, &a, 1e-3, 0.0).is_err());
    }
}

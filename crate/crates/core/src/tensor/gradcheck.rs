use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{GradientMap, ParamStore};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences at step 1e-5 carry roughly 1e-10 of rounding
/// noise for losses of order one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub step: f64,
    pub tol: f64,
    /// Max relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub worst: Option<CoordinateError>,
    pub coordinates: usize,
    pub passed: bool,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` for every
/// coordinate of every parameter named in `analytic`.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, analytic: &GradientMap, step: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let base = f(params)?;
    let again = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::VerificationInvalid(format!("objective is not deterministic: {base} then {again}")));
    }

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut worst: Option<CoordinateError> = None;
    let mut coordinates = 0;
    for (name, grad) in analytic.iter() {
        let original = params.require(name)?.clone();
        if original.shape() != grad.shape() {
            return Err(Error::Shape { op: "finite_diff_check", lhs: original.shape().to_vec(), rhs: grad.shape().to_vec() });
        }
        let mut max_err = 0.0f64;
        for i in 0..original.numel() {
            let x = original.data()[i];
            work.get_mut(name).expect("cloned store has every name").data_mut()[i] = x + step;
            let plus = f(&work)?;
            work.get_mut(name).expect("cloned store has every name").data_mut()[i] = x - step;
            let minus = f(&work)?;
            work.get_mut(name).expect("cloned store has every name").data_mut()[i] = x;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            coordinates += 1;
            max_err = max_err.max(err);
            if worst.as_ref().is_none_or(|w| err > w.rel_error) {
                worst = Some(CoordinateError { param: name.to_string(), index: i, analytic: a, numeric, rel_error: err });
            }
        }
        per_param.insert(name.to_string(), max_err);
    }
    let passed = worst.as_ref().is_none_or(|w| w.rel_error < tol);
    Ok(FiniteDiffReport { step, tol, per_param, worst, coordinates, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binder, Graph, Tensor};
    use std::cell::Cell;

    fn sum_of_squares(store: &ParamStore) -> Result<(f64, GradientMap)> {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let x = b.bind(&mut g, "x")?;
        let sq = g.mul(x, x)?;
        let loss = g.sum(sq);
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), b.gradient_map(&grads, &["x".to_string()])?))
    }

    #[test]
    fn quadratic_matches_analytic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let (_, grads) = sum_of_squares(&store).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
        let report = finite_diff_check(|p| sum_of_squares(p).map(|r| r.0), &store, &grads, 1e-5, 1e-8).unwrap();
        assert!(report.passed, "{:?}", report.worst);
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5, -1.5, 3.0]));
        let zero = GradientMap::zeros_like(&store, &["w".to_string()]).unwrap();
        let report = finite_diff_check(|_| Ok(4.25), &store, &zero, 1e-5, 1e-12).unwrap();
        assert!(report.passed);
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.5]));
        let zero = GradientMap::zeros_like(&store, &["w".to_string()]).unwrap();
        let calls = Cell::new(0.0);
        let result = finite_diff_check(
            |_| {
                calls.set(calls.get() + 1.0);
                Ok(calls.get())
            },
            &store,
            &zero,
            1e-5,
            1e-6,
        );
        assert!(matches!(result, Err(Error::VerificationInvalid(_))));
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut wrong = GradientMap::new();
        wrong.insert("x", Tensor::vector(vec![2.0, 4.1]));
        let report = finite_diff_check(|p| sum_of_squares(p).map(|r| r.0), &store, &wrong, 1e-5, 1e-6).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.unwrap().index, 1);
    }
}

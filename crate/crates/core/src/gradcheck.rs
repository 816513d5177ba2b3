//! Central finite-difference gradient checking on the f64 path.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative error, so near-zero gradients compare absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `f` against central differences `(f(x+h) - f(x-h)) / 2h` for a single input.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h, tol)
}

/// Multi-input variant: `f` receives one leaf per entry of `inputs`.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::GradCheck(format!("function must be scalar, got shape {:?}", g.shape(out))));
        }
        Ok(g.value(out).item())
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic ({base:e} vs {again:e}); freeze its randomness"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[ei], numeric);
            if !(err <= max_rel_err) {
                max_rel_err = err;
                worst = (ti, ei);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, checked, tol, passed: max_rel_err < tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.3, 2.0, 1.5, -4.0, 0.0]).unwrap();
        let r = gradcheck(|g, x| g.sum(x), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn cross_entropy_1x4() {
        let x = Tensor::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = gradcheck(|g, x| g.softmax_cross_entropy(x, &[2]), &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn nondeterministic_function_aborts() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                calls.set(calls.get() + 1);
                let y = g.scale(x, calls.get() as f64)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck(_)));
    }
}

//! Central finite-difference utilities. These evaluate a forward-only
//! closure at perturbed inputs and never touch the reverse-mode machinery,
//! so they serve as an independent oracle for every analytic gradient in
//! the crate's test suites.

use crate::error::Result;
use crate::tensor::Tensor;

/// Numeric gradient of `f` with respect to every element of every input,
/// via central differences with step `h`. The closure must be a pure
/// function of the inputs (re-seed any randomness inside it).
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        let mut g = vec![0.0; inputs[ti].numel()];
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].values()[ei];
            work[ti].values_mut()[ei] = orig + h;
            let plus = f(&work)?;
            work[ti].values_mut()[ei] = orig - h;
            let minus = f(&work)?;
            work[ti].values_mut()[ei] = orig;
            g[ei] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Guarded relative error between two values:
/// |a - b| / max(1, |a|, |b|).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest guarded relative error across two gradient buffers.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_matches_polynomial_derivative() {
        // f(x) = x0^2 + 3 x1, df/dx0 = 2 x0, df/dx1 = 3.
        let x = Tensor::new(vec![1, 2], vec![-2.0, 0.7]).unwrap();
        let grads = central_difference(
            |ts| Ok(ts[0].values()[0].powi(2) + 3.0 * ts[0].values()[1]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rel_error(grads[0][0], -4.0) < 1e-8);
        assert!(rel_error(grads[0][1], 3.0) < 1e-8);
    }

    #[test]
    fn rel_error_guards_small_magnitudes() {
        assert!(rel_error(1e-9, 0.0) < 1e-8);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}

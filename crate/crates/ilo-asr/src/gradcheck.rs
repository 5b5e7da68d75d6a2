//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately independent of the tape: callers supply a plain closure from
//! a flat parameter vector to a scalar, and this module only ever evaluates
//! that closure forward.

/// Central differences (f(x+h) - f(x-h)) / 2h componentwise.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// max_i |a_i - n_i| / (|n_i| + 1e-8)
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

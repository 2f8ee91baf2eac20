//! Finite-difference oracles used to validate every analytic backward rule.
//! The estimator only ever calls the forward pass, so it stays independent
//! of the code under test.

/// Central-difference gradient of `f` at `at` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    let mut out = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Largest violation of |a−b| ≤ abs_tol + rel_tol·max(|a|,|b|), or `None`
/// if every element passes.
pub fn worst_mismatch(a: &[f64], b: &[f64], rel_tol: f64, abs_tol: f64) -> Option<(usize, f64, f64)> {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let bound = abs_tol + rel_tol * x.abs().max(y.abs());
        let excess = (x - y).abs() - bound;
        if excess > 0.0 && worst.map_or(true, |w| excess > w.3) {
            worst = Some((i, x, y, excess));
        }
    }
    worst.map(|(i, x, y, _)| (i, x, y))
}

/// Panics with a diagnostic when any element of `analytic` disagrees with
/// `numeric` beyond the tolerance.
pub fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) {
    if let Some((i, a, n)) = worst_mismatch(analytic, numeric, rel_tol, abs_tol) {
        panic!(
            "gradient mismatch at index {i}: analytic {a:e} vs numeric {n:e} \
             (rel_tol {rel_tol:e}, abs_tol {abs_tol:e})"
        );
    }
}

//! Helpers shared by unit tests: the central finite-difference oracle and
//! the relative-error gauge used for every gradient check.

use alloc::vec::Vec;

/// |a-b| relative to max(|a|, |b|), floored so that near-zero gradients
/// (where central differences are dominated by rounding) do not spuriously
/// fail the 1e-4 bound.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function at `x`, step `h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Assert an autodiff gradient against the finite-difference oracle.
pub fn assert_grad_close(ad: &[f64], fd: &[f64], tol: f64, ctx: &str) {
    assert_eq!(ad.len(), fd.len(), "{ctx}: gradient length");
    for (i, (&a, &b)) in ad.iter().zip(fd).enumerate() {
        let e = rel_err(a, b);
        assert!(
            e <= tol,
            "{ctx}: grad[{i}] autodiff={a} fd={b} rel_err={e}"
        );
    }
}

//! Central finite-difference helpers used by the gradient test suites.

/// Central-difference gradient of a scalar function at `x`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let x0 = x[i];
        xp[i] = x0 + eps;
        let fp = f(&xp);
        xp[i] = x0 - eps;
        let fm = f(&xp);
        xp[i] = x0;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Max relative error between two gradient vectors, with an absolute
/// floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

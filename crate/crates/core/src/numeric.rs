//! Scalar numerics: logistic helpers, bracketed root finding and adaptive
//! quadrature.

use crate::error::{Error, Result};

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Bisection for an increasing-or-decreasing `f` with a sign change in
/// `[lo, hi]`. The bracket is expanded geometrically (in the direction of
/// `hi`) until a sign change is found. Stops when `|f| <= ftol` or the
/// bracket collapses.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, ftol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    let mut expansions = 0;
    while flo.signum() == fhi.signum() {
        if expansions > 200 {
            return Err(Error::Numerical(format!(
                "no sign change found in [{lo}, {hi}]"
            )));
        }
        let width = hi - lo;
        lo = hi;
        flo = fhi;
        hi += 2.0 * width;
        fhi = f(hi);
        expansions += 1;
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= ftol || (hi - lo).abs() <= f64::EPSILON * mid.abs().max(1e-300) {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_inverse_of_logit() {
        for &p in &[1e-6, 0.1, 0.5, 0.73, 0.999] {
            assert!((logistic(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(logistic(800.0), 1.0);
        assert!(logistic(-800.0) >= 0.0);
    }

    #[test]
    fn bisect_expands_bracket() {
        let r = bisect(|x| x * x - 50.0, 0.0, 1.0, 1e-12).unwrap();
        assert!((r - 50f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn simpson_on_polynomial_and_exp() {
        let v = integrate(&|x: f64| 3.0 * x * x, 0.0, 2.0, 1e-12);
        assert!((v - 8.0).abs() < 1e-10);
        let v = integrate(&|x: f64| x.exp(), 0.0, 1.0, 1e-12);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-10);
    }
}

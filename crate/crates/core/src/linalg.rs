//! Dense-vector kernels shared by the solvers.
//!
//! Reductions are summed over fixed-size blocks in a fixed order, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;

const BLOCK: usize = 4096;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() <= BLOCK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partial: Vec<f64> = a
        .par_chunks(BLOCK)
        .zip(b.par_chunks(BLOCK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Order-stable sum of `f(i, a[i])`.
pub(crate) fn sum_map(a: &[f64], f: impl Fn(f64) -> f64 + Sync) -> f64 {
    if a.len() <= BLOCK {
        return a.iter().map(|&x| f(x)).sum();
    }
    let partial: Vec<f64> = a.par_chunks(BLOCK).map(|x| x.iter().map(|&v| f(v)).sum::<f64>()).collect();
    partial.iter().sum()
}

/// `y ← y + a·x`
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut().zip(x.par_iter()).with_min_len(BLOCK).for_each(|(yi, xi)| *yi += a * xi);
}

pub(crate) fn scale(a: f64, x: &mut [f64]) {
    x.par_iter_mut().with_min_len(BLOCK).for_each(|v| *v *= a);
}

/// Conjugate gradients for a symmetric positive definite `apply`, starting
/// from the contents of `x`. Stops when `‖b − Ax‖ ≤ rtol·‖b‖` and returns
/// the final relative residual.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> f64 {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return 0.0;
    }
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rtol * bnorm;
    let mut ap = ax;
    let mut it = 0;
    while rr.sqrt() > target && it < max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        p.par_iter_mut().zip(r.par_iter()).with_min_len(BLOCK).for_each(|(pi, ri)| *pi = ri + beta * *pi);
        it += 1;
    }
    rr.sqrt() / bnorm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_tridiagonal_system() {
        let n = 50;
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                y[i] = 2.0 * x[i] - l - r;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; n];
        let out = conjugate_gradient(apply, &b, &mut x, 1e-12, 500);
        assert!(out <= 1e-12);
        let mut check = vec![0.0; n];
        apply(&x, &mut check);
        for (c, bi) in check.iter().zip(&b) {
            assert!((c - bi).abs() < 1e-9);
        }
    }

    #[test]
    fn blocked_dot_matches_serial() {
        let a: Vec<f64> = (0..10_000).map(|i| (i as f64).cos()).collect();
        let b: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.5).sin()).collect();
        let serial: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - serial).abs() < 1e-9);
    }
}

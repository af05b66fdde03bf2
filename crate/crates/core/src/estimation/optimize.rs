//! BFGS minimization with a backtracking Armijo line search.

use crate::scalar::Real;

use super::linalg::{dot, max_abs};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when `max|grad| <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
}

impl BfgsOptions {
    pub fn for_scalar<T: Real>() -> Self {
        BfgsOptions {
            max_iter: 1000,
            grad_tol: T::epsilon().as_f64().sqrt() * 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult<T> {
    pub x: Vec<T>,
    pub fx: T,
    pub grad: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn bfgs_minimize<T: Real, F>(f: F, x0: Vec<T>, opts: BfgsOptions) -> BfgsResult<T>
where
    F: Fn(&[T]) -> (T, Vec<T>),
{
    let n = x0.len();
    let tol = T::lit(opts.grad_tol);
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    // inverse Hessian approximation
    let mut h: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let c1 = T::lit(1e-4);
    let half = T::lit(0.5);

    let done = |fx: T, g: &[T]| max_abs(g) <= tol * fx.abs().max(T::one());

    for iter in 0..opts.max_iter {
        if !fx.is_finite() {
            return BfgsResult { x, fx, grad: g, iterations: iter, converged: false };
        }
        if done(fx, &g) {
            return BfgsResult { x, fx, grad: g, iterations: iter, converged: true };
        }
        let mut p: Vec<T> = h.iter().map(|row| -dot(row, &g)).collect();
        let mut slope = dot(&p, &g);
        if !(slope < T::zero()) {
            // not a descent direction: restart from steepest descent
            for (i, row) in h.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { T::one() } else { T::zero() };
                }
            }
            p = g.iter().map(|&v| -v).collect();
            slope = dot(&p, &g);
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<T> = x.iter().zip(&p).map(|(&xi, &pi)| xi + step * pi).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + c1 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step = step * half;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // no further decrease available at working precision
            let loose = max_abs(&g) <= tol * T::lit(1e3) * fx.abs().max(T::one());
            return BfgsResult { x, fx, grad: g, iterations: iter, converged: loose };
        };

        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            let rho = T::one() / sy;
            let hy: Vec<T> = h.iter().map(|row| dot(row, &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] = h[i][j] - rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let converged = done(fx, &g);
    BfgsResult { x, fx, grad: g, iterations: opts.max_iter, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let r = bfgs_minimize(f, vec![-1.2, 1.0], BfgsOptions::for_scalar::<f64>());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_in_f32() {
        let f = |x: &[f32]| {
            let v = (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            (v, vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)])
        };
        let r = bfgs_minimize(f, vec![0.0, 0.0], BfgsOptions::for_scalar::<f32>());
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-3 && (r.x[1] + 1.0).abs() < 1e-3);
    }
}

//! Lanczos based matrix exponential and lowest eigenvalues for Hermitian operators.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::state::State;
use crate::C64;

/// Error estimates below this are roundoff in the small tridiagonal exponential and always accepted.
const ROUNDOFF_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct KrylovOptions {
    /// Target error of the whole propagation relative to the input norm.
    pub tol: f64,
    pub max_dim: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions { tol: 1e-10, max_dim: 30 }
    }
}

struct Lanczos {
    basis: Vec<State>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// norm of the residual after the last basis vector; zero on an invariant subspace
    tail: f64,
}

fn lanczos(apply: &dyn Fn(&State) -> State, start: &State, max_dim: usize) -> Lanczos {
    let mut basis = vec![start.clone().normalized()];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut tail = 0.0;
    for j in 0..max_dim {
        let mut u = apply(&basis[j]);
        let a = basis[j].inner(&u).re;
        alpha.push(a);
        u.axpy(C64::new(-a, 0.0), &basis[j]);
        if j > 0 {
            u.axpy(C64::new(-beta[j - 1], 0.0), &basis[j - 1]);
        }
        for _ in 0..2 {
            for v in &basis {
                let c = v.inner(&u);
                u.axpy(-c, v);
            }
        }
        let b = u.norm();
        let scale = alpha.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if b <= 1e-13 * scale {
            tail = b;
            break;
        }
        if j + 1 == max_dim {
            tail = b;
            break;
        }
        u.scale(C64::new(1.0 / b, 0.0));
        beta.push(b);
        basis.push(u);
    }
    basis.truncate(alpha.len());
    Lanczos { basis, alpha, beta, tail }
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let e = crate::dense::eigh_real(t);
    (e.eigenvalues.iter().cloned().collect(), e.eigenvectors)
}

/// `exp(-i tau H) v` for a Hermitian `H` given by its action.
pub fn expm_krylov(apply: &dyn Fn(&State) -> State, v: &State, tau: f64, opts: &KrylovOptions) -> Result<State> {
    let norm0 = v.norm();
    if norm0 == 0.0 || tau == 0.0 {
        return Ok(v.clone());
    }
    let mut w = v.clone();
    let mut done = 0.0;
    let mut h_try = tau.abs();
    let sign = tau.signum();
    let total = tau.abs();
    while done < total * (1.0 - 1e-14) {
        let beta0 = w.norm();
        let lz = lanczos(apply, &w, opts.max_dim);
        let (lam, u) = tridiagonal_eigen(&lz.alpha, &lz.beta);
        let m = lz.alpha.len();
        let remaining = total - done;
        let mut h = h_try.min(remaining);
        let mut halvings = 0;
        let coeff = |k: usize, s: f64| -> C64 { (0..m).map(|l| C64::from_polar(u[(k, l)] * u[(0, l)], -sign * s * lam[l])).sum() };
        let y = loop {
            let y: Vec<C64> = (0..m).map(|k| coeff(k, h)).collect();
            // |error| <= tail * int_0^h |y_m(s)| ds; the last coefficient is sampled inside the step
            let peak = [0.25, 0.5, 0.75].iter().map(|f| coeff(m - 1, f * h).norm()).fold(y[m - 1].norm(), f64::max);
            let err = lz.tail * h * peak;
            if err <= opts.tol * h / total || err <= ROUNDOFF_FLOOR {
                break y;
            }
            h *= 0.5;
            halvings += 1;
            if h < total * 1e-12 {
                return Err(Error::KrylovBreakdown(format!("step collapsed with error {err:e}")));
            }
        };
        let mut next = w.zeros_like();
        for (k, b) in lz.basis.iter().enumerate() {
            next.axpy(y[k] * beta0, b);
        }
        w = next;
        done += h;
        h_try = if halvings == 0 { h * 1.5 } else { h };
    }
    Ok(w)
}

/// Lowest `count` Ritz values after at most `max_dim` Lanczos steps with full reorthogonalisation.
pub fn lanczos_lowest(apply: &dyn Fn(&State) -> State, start: &State, count: usize, max_dim: usize) -> Vec<f64> {
    let lz = lanczos(apply, start, max_dim);
    let (mut lam, _) = tridiagonal_eigen(&lz.alpha, &lz.beta);
    lam.sort_by(|a, b| a.total_cmp(b));
    lam.truncate(count);
    lam
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn matches_diagonal_exponential() {
        let g = Grid::new(16, 1.0).unwrap();
        let diag: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let d2 = diag.clone();
        let apply = move |s: &State| {
            let data = s.data().iter().zip(&d2).map(|(v, e)| v * e).collect();
            State::from_data(s.grid(), 1, 1, data)
        };
        let v = State::from_data(&g, 1, 1, (0..16).map(|i| C64::new(1.0, i as f64 * 0.1)).collect());
        let out = expm_krylov(&apply, &v, 7.3, &KrylovOptions { tol: 1e-12, max_dim: 12 }).unwrap();
        for i in 0..16 {
            let exact = v.data()[i] * C64::from_polar(1.0, -7.3 * diag[i]);
            assert!((out.data()[i] - exact).norm() < 1e-9);
        }
        let low = lanczos_lowest(&apply, &v, 3, 16);
        let mut sorted = diag.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for k in 0..3 {
            assert!((low[k] - sorted[k]).abs() < 1e-10);
        }
    }
}

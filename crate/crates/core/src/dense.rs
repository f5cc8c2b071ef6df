//! Dense matrix helpers for small grids: materialised operators and spectral functions.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen};

use crate::grid::Grid;
use crate::state::State;
use crate::C64;

pub type DenseMatrix = DMatrix<C64>;

/// Matrix of a linear map in the grid basis (`index = (sector * n + x) * dim + a`).
pub fn to_dense(apply: &dyn Fn(&State) -> State, grid: &Grid, dim: usize, sectors: usize) -> DenseMatrix {
    let size = grid.n() * dim * sectors;
    let mut m = DenseMatrix::zeros(size, size);
    let mut e = State::zeros(grid, dim, sectors);
    for col in 0..size {
        e.data_mut()[col] = C64::new(1.0, 0.0);
        let out = apply(&e);
        for (row, v) in out.data().iter().enumerate() {
            m[(row, col)] = *v;
        }
        e.data_mut()[col] = C64::new(0.0, 0.0);
    }
    m
}

pub fn apply_dense(m: &DenseMatrix, psi: &State) -> State {
    let v = DVector::from_column_slice(psi.data());
    let out = m * v;
    State::from_data(psi.grid(), psi.dim(), psi.sectors(), out.as_slice().to_vec())
}

/// Eigendecomposition of a complex Hermitian matrix, eigenvalues ascending.
///
/// nalgebra's QR iteration can stop on nearly degenerate pairs of a tridiagonal with residuals
/// far above roundoff, so the decomposition is done by faer.
pub fn eigh(m: DMatrix<C64>) -> SymmetricEigen<C64, Dyn> {
    let f = faer::Mat::<faer::c64>::from_fn(m.nrows(), m.ncols(), |i, j| faer::c64::new(m[(i, j)].re, m[(i, j)].im));
    let e = f.self_adjoint_eigen(faer::Side::Lower).expect("Hermitian eigendecomposition");
    let (u, s) = (e.U(), e.S());
    SymmetricEigen {
        eigenvectors: DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| C64::new(u[(i, j)].re, u[(i, j)].im)),
        eigenvalues: DVector::from_fn(m.nrows(), |k, _| s[k].re),
    }
}

/// Real symmetric counterpart of [`eigh`].
pub fn eigh_real(m: DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let e = f.self_adjoint_eigen(faer::Side::Lower).expect("symmetric eigendecomposition");
    let (u, s) = (e.U(), e.S());
    SymmetricEigen { eigenvectors: DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| u[(i, j)]), eigenvalues: DVector::from_fn(m.nrows(), |k, _| s[k]) }
}

/// Hermitian part `(m + m^*) / 2`.
pub fn hermitian_part(m: &DenseMatrix) -> DenseMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// `f(m)` for Hermitian `m` through its eigendecomposition.
pub fn hermitian_function(m: &DenseMatrix, f: impl Fn(f64) -> C64) -> DenseMatrix {
    let e = eigh(hermitian_part(m));
    let mut scaled = e.eigenvectors.clone();
    for (k, lam) in e.eigenvalues.iter().enumerate() {
        let s = f(*lam);
        for v in scaled.column_mut(k).iter_mut() {
            *v *= s;
        }
    }
    scaled * e.eigenvectors.adjoint()
}

/// `exp(-i tau m)` for Hermitian `m`.
pub fn expm_hermitian(m: &DenseMatrix, tau: f64) -> DenseMatrix {
    hermitian_function(m, |l| C64::from_polar(1.0, -tau * l))
}

/// Largest singular value.
pub fn operator_norm(m: &DenseMatrix) -> f64 {
    let g = m.adjoint() * m;
    let e = eigh(hermitian_part(&g));
    e.eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt()
}

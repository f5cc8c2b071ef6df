//! Matrix valued fields `x -> A(x)` on the nuclear grid.

use nalgebra::DMatrix;

use crate::grid::Grid;
use crate::state::State;
use crate::C64;

pub type Mat = DMatrix<C64>;

#[derive(Clone, Debug)]
pub struct FiberField {
    dim: usize,
    mats: Vec<Mat>,
}

impl FiberField {
    pub fn new(dim: usize, mats: Vec<Mat>) -> Self {
        assert!(mats.iter().all(|m| m.nrows() == dim && m.ncols() == dim));
        FiberField { dim, mats }
    }

    pub fn from_fn(grid: &Grid, dim: usize, f: impl Fn(f64) -> Mat) -> Self {
        FiberField::new(dim, (0..grid.n()).map(|i| f(grid.x(i))).collect())
    }

    pub fn constant(n: usize, m: Mat) -> Self {
        FiberField { dim: m.nrows(), mats: vec![m; n] }
    }

    pub fn identity(n: usize, dim: usize) -> Self {
        FiberField::constant(n, Mat::identity(dim, dim))
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        FiberField::constant(n, Mat::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn at(&self, i: usize) -> &Mat {
        &self.mats[i]
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn map(&self, f: impl Fn(usize, &Mat) -> Mat) -> FiberField {
        let mats: Vec<Mat> = self.mats.iter().enumerate().map(|(i, m)| f(i, m)).collect();
        let dim = mats.first().map(|m| m.nrows()).unwrap_or(self.dim);
        FiberField { dim, mats }
    }

    /// Pointwise product `self(x) * other(x)`.
    pub fn mul(&self, other: &FiberField) -> FiberField {
        self.map(|i, m| m * &other.mats[i])
    }

    pub fn add(&self, other: &FiberField) -> FiberField {
        self.map(|i, m| m + &other.mats[i])
    }

    pub fn sub(&self, other: &FiberField) -> FiberField {
        self.map(|i, m| m - &other.mats[i])
    }

    pub fn scale(&self, a: C64) -> FiberField {
        self.map(|_, m| m * a)
    }

    pub fn adjoint(&self) -> FiberField {
        self.map(|_, m| m.adjoint())
    }

    /// Pointwise commutator `[self, other]`.
    pub fn commutator(&self, other: &FiberField) -> FiberField {
        self.map(|i, m| m * &other.mats[i] - &other.mats[i] * m)
    }

    pub fn max_abs(&self) -> f64 {
        self.mats.iter().flat_map(|m| m.iter()).map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest pointwise deviation from Hermiticity, with the point where it occurs.
    pub fn hermitian_residual(&self) -> (usize, f64) {
        let mut worst = (0, 0.0);
        for (i, m) in self.mats.iter().enumerate() {
            let r = (m - m.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
            if r > worst.1 {
                worst = (i, r);
            }
        }
        worst
    }

    /// Entrywise spectral derivative of the given order.
    pub fn derivative(&self, grid: &Grid, order: u32) -> FiberField {
        if order == 0 {
            return self.clone();
        }
        let n = self.mats.len();
        let mut out = self.clone();
        let sym = grid.derivative_symbol(order);
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for r in 0..self.dim {
            for c in 0..self.dim {
                for i in 0..n {
                    buf[i] = self.mats[i][(r, c)];
                }
                grid.fft(&mut buf);
                for (v, s) in buf.iter_mut().zip(&sym) {
                    *v *= s;
                }
                grid.ifft(&mut buf);
                for i in 0..n {
                    out.mats[i][(r, c)] = buf[i];
                }
            }
        }
        out
    }

    /// Worst relative Fourier tail over all entries.
    pub fn fourier_tail(&self, grid: &Grid) -> f64 {
        let n = self.mats.len();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for r in 0..self.dim {
            for c in 0..self.dim {
                for i in 0..n {
                    buf[i] = self.mats[i][(r, c)];
                }
                let amp = buf.iter().map(|v| v.norm()).fold(0.0, f64::max);
                if amp < 1e-14 * scale {
                    continue;
                }
                worst = worst.max(grid.fourier_tail(&buf) * amp / scale);
            }
        }
        worst
    }

    /// Pointwise action on every sector of a state.
    pub fn apply(&self, psi: &State) -> State {
        let mut out = psi.zeros_like();
        self.apply_into(psi, &mut out, C64::new(1.0, 0.0));
        out
    }

    /// `out += a * self psi`
    pub fn apply_into(&self, psi: &State, out: &mut State, a: C64) {
        let d = self.dim;
        assert_eq!(psi.dim(), d);
        let n = self.mats.len();
        for s in 0..psi.sectors() {
            for i in 0..n {
                let m = &self.mats[i];
                let v: Vec<C64> = psi.fiber(s, i).to_vec();
                let o = out.fiber_mut(s, i);
                for r in 0..d {
                    let mut acc = C64::new(0.0, 0.0);
                    for c in 0..d {
                        acc += m[(r, c)] * v[c];
                    }
                    o[r] += a * acc;
                }
            }
        }
    }
}

//! Periodic nuclear grid with FFT based spectral calculus.

use std::fmt;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::C64;

/// Uniform periodic grid on `[0, length)` with a power of two number of points.
#[derive(Clone)]
pub struct Grid {
    n: usize,
    length: f64,
    k: Arc<Vec<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("n", &self.n).field("length", &self.length).finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.length == other.length
    }
}

impl Grid {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!("n_points = {n} must be a power of two >= 4")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::InvalidGrid(format!("length = {length} must be positive")));
        }
        let base = 2.0 * std::f64::consts::PI / length;
        // the Nyquist mode is dropped so that odd derivatives stay real and skew-adjoint
        let k = (0..n)
            .map(|i| {
                if i < n / 2 {
                    base * i as f64
                } else if i == n / 2 {
                    0.0
                } else {
                    base * (i as f64 - n as f64)
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Grid {
            n,
            length,
            k: Arc::new(k),
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Angular wavenumbers in FFT order (Nyquist entry set to zero).
    pub fn wavenumbers(&self) -> &[f64] {
        &self.k
    }

    /// Largest resolved wavenumber.
    pub fn k_max(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.length * (self.n / 2 - 1) as f64
    }

    pub fn fft(&self, buf: &mut [C64]) {
        self.fwd.process(buf);
    }

    /// Inverse FFT including the `1/n` normalisation.
    pub fn ifft(&self, buf: &mut [C64]) {
        self.inv.process(buf);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    /// Fourier multiplier `(i k)^order`.
    pub fn derivative_symbol(&self, order: u32) -> Vec<C64> {
        self.k.iter().map(|&k| C64::new(0.0, k).powu(order)).collect()
    }

    /// Spectral derivative of a scalar periodic sample.
    pub fn derivative(&self, f: &[C64], order: u32) -> Vec<C64> {
        let mut buf = f.to_vec();
        if order == 0 {
            return buf;
        }
        self.fft(&mut buf);
        for (v, s) in buf.iter_mut().zip(self.derivative_symbol(order)) {
            *v *= s;
        }
        self.ifft(&mut buf);
        buf
    }

    pub fn derivative_real(&self, f: &[f64], order: u32) -> Vec<f64> {
        let c: Vec<C64> = f.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.derivative(&c, order).into_iter().map(|v| v.re).collect()
    }

    /// Apply a Fourier multiplier to every interleaved component of `data`.
    ///
    /// `data` holds `n * stride` values laid out as `x * stride + component`.
    pub fn apply_multiplier(&self, data: &mut [C64], stride: usize, mult: &[C64]) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * stride);
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for c in 0..stride {
            for i in 0..n {
                buf[i] = data[i * stride + c];
            }
            self.fft(&mut buf);
            for (v, m) in buf.iter_mut().zip(mult) {
                *v *= m;
            }
            self.ifft(&mut buf);
            for i in 0..n {
                data[i * stride + c] = buf[i];
            }
        }
    }

    /// Largest Fourier amplitude in the upper half of the resolved band relative to the
    /// largest amplitude overall.
    pub fn fourier_tail(&self, f: &[C64]) -> f64 {
        let mut buf = f.to_vec();
        self.fft(&mut buf);
        let total = buf.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if total == 0.0 {
            return 0.0;
        }
        let n = self.n;
        let tail = buf
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let m = if *i <= n / 2 { *i } else { n - *i };
                m >= n / 4
            })
            .map(|(_, v)| v.norm())
            .fold(0.0, f64::max);
        tail / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes() {
        assert!(Grid::new(48, 1.0).is_err());
        assert!(Grid::new(64, 0.0).is_err());
        assert!(Grid::new(64, 1.0).is_ok());
    }

    #[test]
    fn spectral_derivative_of_trig() {
        let g = Grid::new(64, 2.0 * std::f64::consts::PI).unwrap();
        let f: Vec<f64> = g.points().iter().map(|x| (3.0 * x).sin()).collect();
        let d1 = g.derivative_real(&f, 1);
        let d2 = g.derivative_real(&f, 2);
        for (i, x) in g.points().iter().enumerate() {
            assert!((d1[i] - 3.0 * (3.0 * x).cos()).abs() < 1e-12);
            assert!((d2[i] + 9.0 * (3.0 * x).sin()).abs() < 1e-11);
        }
    }
}

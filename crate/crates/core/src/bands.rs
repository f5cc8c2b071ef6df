//! Pointwise diagonalisation of the electronic fiber in the parallel transport gauge.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fiber::{FiberField, Mat};
use crate::grid::Grid;
use crate::model::FiberModel;
use crate::C64;

pub type Vector = DVector<C64>;

#[derive(Clone, Debug)]
pub struct BandOptions {
    /// Minimal separation of neighbouring eigenvalues relative to the spectral range.
    pub degeneracy_tol: f64,
}

impl Default for BandOptions {
    fn default() -> Self {
        BandOptions { degeneracy_tol: 1e-6 }
    }
}

/// Eigenvalues and eigenvectors of `H_el(x)` on every grid point.
///
/// Eigenvectors are gauge fixed by discrete parallel transport: `<phi(x_k), phi(x_{k+1})>` is
/// real and positive for `k < n - 1`. Continuing the transport across the last link gives
/// `exp(i seam) phi(x_0)`, the recorded holonomy.
#[derive(Clone, Debug)]
pub struct BandData {
    grid: Grid,
    energies: Vec<Vec<f64>>,
    vectors: Vec<Vec<Vector>>,
    seam: Vec<f64>,
}

pub fn hermitian_eigen(m: &Mat) -> (Vec<f64>, Vec<Vector>) {
    let e = crate::dense::eigh(m.clone());
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = idx.iter().map(|&k| e.eigenvalues[k]).collect();
    let vecs = idx.iter().map(|&k| e.eigenvectors.column(k).into_owned()).collect();
    (vals, vecs)
}

pub fn diagonalize_bands(model: &FiberModel, opts: &BandOptions) -> Result<BandData> {
    let grid = model.grid().clone();
    let n = grid.n();
    let d = model.dim();
    let mut energies = vec![vec![0.0; n]; d];
    let mut vectors: Vec<Vec<Vector>> = vec![Vec::with_capacity(n); d];
    for i in 0..n {
        let (vals, vecs) = hermitian_eigen(model.h_el().at(i));
        for (b, (v, w)) in vals.into_iter().zip(vecs).enumerate() {
            energies[b][i] = v;
            vectors[b].push(w);
        }
    }
    let lo = energies[0].iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = energies[d - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    for i in 0..n {
        for b in 0..d.saturating_sub(1) {
            let sep = energies[b + 1][i] - energies[b][i];
            if sep < opts.degeneracy_tol * range {
                return Err(Error::DegenerateBand { x: grid.x(i), lower: b, upper: b + 1, separation: sep });
            }
        }
    }
    let mut seam = vec![0.0; d];
    for b in 0..d {
        let vs = &mut vectors[b];
        let (k, _) = vs[0].iter().enumerate().fold((0, -1.0), |acc, (k, v)| if v.norm() > acc.1 { (k, v.norm()) } else { acc });
        let ph = vs[0][k].conj() / vs[0][k].norm();
        vs[0] *= ph;
        for i in 1..n {
            let s = vs[i - 1].dotc(&vs[i]);
            if s.norm() < 1e-8 {
                return Err(Error::Validation(format!("eigenvector field of band {b} jumps at x = {}; refine the grid", grid.x(i))));
            }
            let ph = s.conj() / s.norm();
            vs[i] *= ph;
        }
        seam[b] = -vs[n - 1].dotc(&vs[0]).arg();
    }
    Ok(BandData { grid, energies, vectors, seam })
}

impl BandData {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self, j: usize) -> &[f64] {
        &self.energies[j]
    }

    pub fn vector(&self, j: usize, i: usize) -> &Vector {
        &self.vectors[j][i]
    }

    pub fn vectors(&self, j: usize) -> &[Vector] {
        &self.vectors[j]
    }

    /// Holonomy phase recorded at the seam between the last and the first grid point.
    pub fn holonomy(&self, j: usize) -> f64 {
        self.seam[j]
    }

    pub fn projector(&self, j: usize) -> FiberField {
        FiberField::new(self.dim(), self.vectors[j].iter().map(|v| v * v.adjoint()).collect())
    }

    /// `P_perp (H_el - E_j)^{-1} P_perp` on every grid point.
    pub fn reduced_resolvent(&self, j: usize) -> FiberField {
        let d = self.dim();
        let mats = (0..self.grid.n())
            .map(|i| {
                let mut m = Mat::zeros(d, d);
                for b in (0..d).filter(|&b| b != j) {
                    let v = &self.vectors[b][i];
                    m += v * v.adjoint() * C64::new(1.0 / (self.energies[b][i] - self.energies[j][i]), 0.0);
                }
                m
            })
            .collect();
        FiberField::new(d, mats)
    }

    /// Distance of band `j` to the rest of the spectrum at every grid point.
    pub fn gap(&self, j: usize) -> Vec<f64> {
        (0..self.grid.n())
            .map(|i| {
                (0..self.dim())
                    .filter(|&b| b != j)
                    .map(|b| (self.energies[b][i] - self.energies[j][i]).abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn verify_gap(&self, j: usize, threshold: f64) -> Result<()> {
        let gap = self.gap(j);
        let (i, g) = gap.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &g)| if g < acc.1 { (i, g) } else { acc });
        if g < threshold {
            return Err(Error::GapViolation { x: self.grid.x(i), gap: g, threshold });
        }
        Ok(())
    }

    /// Eigenvectors of band `j` multiplied by `exp(-i seam x / L)`: a smooth periodic gauge.
    pub fn smooth_vectors(&self, j: usize) -> Vec<Vector> {
        let l = self.grid.length();
        self.vectors[j]
            .iter()
            .enumerate()
            .map(|(i, v)| v * C64::from_polar(1.0, -self.seam[j] * self.grid.x(i) / l))
            .collect()
    }

    fn connection_of(&self, vs: &[Vector]) -> (Vec<f64>, f64) {
        let n = self.grid.n();
        let d = self.dim();
        let mut dv: Vec<Vector> = vec![Vector::zeros(d); n];
        for a in 0..d {
            let comp: Vec<C64> = vs.iter().map(|v| v[a]).collect();
            let der = self.grid.derivative(&comp, 1);
            for i in 0..n {
                dv[i][a] = der[i];
            }
        }
        let mut imag: f64 = 0.0;
        let a = (0..n)
            .map(|i| {
                let z = C64::new(0.0, 1.0) * vs[i].dotc(&dv[i]);
                imag = imag.max(z.im.abs());
                z.re
            })
            .collect();
        (a, imag)
    }

    /// Berry connection `A_j = i <phi_j, d phi_j>` of the stored gauge, together with the
    /// largest imaginary part met while evaluating it.
    pub fn berry_connection(&self, j: usize) -> (Vec<f64>, f64) {
        let (a, imag) = self.connection_of(&self.smooth_vectors(j));
        let shift = self.seam[j] / self.grid.length();
        (a.into_iter().map(|v| v - shift).collect(), imag)
    }

    /// Berry connection of the smooth periodic gauge returned by [`BandData::smooth_vectors`].
    pub fn smooth_connection(&self, j: usize) -> Vec<f64> {
        self.connection_of(&self.smooth_vectors(j)).0
    }

    /// Born-Huang term `|d phi|^2 - A^2` of band `j` in the smooth gauge.
    pub fn born_huang(&self, j: usize) -> Vec<f64> {
        let vs = self.smooth_vectors(j);
        let n = self.grid.n();
        let d = self.dim();
        let mut sq = vec![0.0; n];
        for a in 0..d {
            let comp: Vec<C64> = vs.iter().map(|v| v[a]).collect();
            let der = self.grid.derivative(&comp, 1);
            for i in 0..n {
                sq[i] += der[i].norm_sqr();
            }
        }
        let a = self.connection_of(&vs).0;
        (0..n).map(|i| sq[i] - a[i] * a[i]).collect()
    }

    /// Transition dipole `D_ij(x) = <phi_i, mu phi_j>`.
    pub fn dipole(&self, i: usize, j: usize, mu: &FiberField) -> Vec<C64> {
        (0..self.grid.n()).map(|k| self.vectors[i][k].dotc(&(mu.at(k) * &self.vectors[j][k]))).collect()
    }

    /// Largest `|<phi_i, [H_el, mu] phi_j> - (E_i - E_j) D_ij|` over the grid.
    pub fn commutator_residual(&self, model: &FiberModel, i: usize, j: usize) -> f64 {
        let comm = model.h_el().commutator(model.mu());
        let dip = self.dipole(i, j, model.mu());
        (0..self.grid.n())
            .map(|k| {
                let lhs = self.vectors[i][k].dotc(&(comm.at(k) * &self.vectors[j][k]));
                (lhs - dip[k] * (self.energies[i][k] - self.energies[j][k])).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Largest `|H phi - E phi| / max(1, |E|)` over bands and grid points.
    pub fn eigen_residual(&self, model: &FiberModel) -> f64 {
        let mut worst: f64 = 0.0;
        for b in 0..self.dim() {
            for k in 0..self.grid.n() {
                let v = &self.vectors[b][k];
                let e = self.energies[b][k];
                let r = (model.h_el().at(k) * v - v * C64::new(e, 0.0)).norm();
                worst = worst.max(r / e.abs().max(1.0));
            }
        }
        worst
    }

    /// Smallest real part and largest `|arg|` of the overlaps of consecutive eigenvectors,
    /// excluding the seam link.
    pub fn transport_overlaps(&self, j: usize) -> (f64, f64) {
        let vs = &self.vectors[j];
        let mut min_re = f64::INFINITY;
        let mut max_arg: f64 = 0.0;
        for k in 0..vs.len() - 1 {
            let s = vs[k].dotc(&vs[k + 1]);
            min_re = min_re.min(s.re);
            max_arg = max_arg.max(s.arg().abs());
        }
        (min_re, max_arg)
    }

    /// Copy with band `j` multiplied by `exp(i gamma(x))`.
    pub fn rephased(&self, j: usize, gamma: impl Fn(f64) -> f64) -> BandData {
        let mut out = self.clone();
        for (i, v) in out.vectors[j].iter_mut().enumerate() {
            *v *= C64::from_polar(1.0, gamma(self.grid.x(i)));
        }
        out.seam[j] += gamma(self.grid.length()) - gamma(0.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RotationParams;

    fn two_pi() -> f64 {
        2.0 * std::f64::consts::PI
    }

    #[test]
    fn rotation_model_bands() {
        let g = Grid::new(64, two_pi()).unwrap();
        let p = RotationParams { theta_amplitude: 0.0, theta_winding: 1, ..Default::default() };
        let m = FiberModel::rotation(&g, &p).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        for i in 0..64 {
            assert!((b.energies(0)[i] + 1.0).abs() < 1e-12);
            assert!((b.energies(1)[i] - 1.0).abs() < 1e-12);
            let x = g.x(i);
            // closed form lower eigenvector (cos x/2, -sin x/2) up to a sign
            let ov = b.vector(0, i)[0] * (x / 2.0).cos() - b.vector(0, i)[1] * (x / 2.0).sin();
            assert!((ov.norm() - 1.0).abs() < 1e-12);
        }
        // a full turn of the mixing angle flips the real eigenvector
        assert!((b.holonomy(0).abs() - std::f64::consts::PI).abs() < 1e-10);
        let (a, imag) = b.berry_connection(0);
        assert!(imag < 1e-10);
        assert!(a.iter().all(|v| v.abs() < 1e-8));
        assert!(b.commutator_residual(&m, 0, 1) < 1e-11);
        assert!(b.verify_gap(0, 1.9).is_ok());
        assert!(matches!(b.verify_gap(0, 2.1), Err(Error::GapViolation { .. })));
    }

    #[test]
    fn crossing_is_reported() {
        let g = Grid::new(64, two_pi()).unwrap();
        let h = FiberField::from_fn(&g, 2, |x| {
            Mat::from_row_slice(2, 2, &[C64::new(x.cos(), 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-x.cos(), 0.0)])
        });
        let m = FiberModel::new(g.clone(), h, FiberField::identity(64, 2)).unwrap();
        let r = diagonalize_bands(&m, &BandOptions { degeneracy_tol: 1e-3 });
        assert!(matches!(r, Err(Error::DegenerateBand { .. })));
    }
}

//! Grid states for the molecule and the one-photon truncated dressed system.
//!
//! A state with one sector is a molecular wavefunction `psi(x) in C^d`. A dressed state
//! has `1 + M` sectors: sector 0 is the photon vacuum and sector `1 + m` holds the
//! amplitude with one photon in mode `m`. Inside a sector the layout is `x * d + a`.

use crate::grid::Grid;
use crate::C64;

#[derive(Clone, Debug)]
pub struct State {
    grid: Grid,
    dim: usize,
    sectors: usize,
    data: Vec<C64>,
}

impl State {
    pub fn zeros(grid: &Grid, dim: usize, sectors: usize) -> Self {
        State { grid: grid.clone(), dim, sectors, data: vec![C64::new(0.0, 0.0); sectors * grid.n() * dim] }
    }

    pub fn from_data(grid: &Grid, dim: usize, sectors: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), sectors * grid.n() * dim, "state data has the wrong length");
        State { grid: grid.clone(), dim, sectors, data }
    }

    /// Molecular state from a closure returning the fiber vector at `x`.
    pub fn molecular_from_fn(grid: &Grid, dim: usize, f: impl Fn(f64) -> Vec<C64>) -> Self {
        let mut s = State::zeros(grid, dim, 1);
        for i in 0..grid.n() {
            let v = f(grid.x(i));
            s.data[i * dim..(i + 1) * dim].copy_from_slice(&v[..dim]);
        }
        s
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sectors(&self) -> usize {
        self.sectors
    }

    pub fn sector_len(&self) -> usize {
        self.grid.n() * self.dim
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn sector(&self, s: usize) -> &[C64] {
        let l = self.sector_len();
        &self.data[s * l..(s + 1) * l]
    }

    pub fn sector_mut(&mut self, s: usize) -> &mut [C64] {
        let l = self.sector_len();
        &mut self.data[s * l..(s + 1) * l]
    }

    /// Copy of one sector as a molecular state.
    pub fn sector_state(&self, s: usize) -> State {
        State::from_data(&self.grid, self.dim, 1, self.sector(s).to_vec())
    }

    pub fn set_sector(&mut self, s: usize, mol: &State) {
        self.sector_mut(s).copy_from_slice(&mol.data);
    }

    pub fn same_shape(&self, other: &State) -> bool {
        self.dim == other.dim && self.sectors == other.sectors && self.grid == other.grid
    }

    pub fn zeros_like(&self) -> State {
        State::zeros(&self.grid, self.dim, self.sectors)
    }

    /// `L^2` inner product `<self, other>` (antilinear in `self`).
    pub fn inner(&self, other: &State) -> C64 {
        debug_assert!(self.same_shape(other));
        let s: C64 = self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum();
        s * self.grid.spacing()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.spacing()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn sector_norm_sqr(&self, s: usize) -> f64 {
        self.sector(s).iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.spacing()
    }

    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(C64::new(1.0 / n, 0.0));
        }
        n
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    pub fn scale(&mut self, a: C64) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: C64, x: &State) {
        debug_assert!(self.same_shape(x));
        for (v, w) in self.data.iter_mut().zip(&x.data) {
            *v += a * w;
        }
    }

    pub fn sub(&self, other: &State) -> State {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }

    pub fn add(&self, other: &State) -> State {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }

    /// Apply a Fourier multiplier to every sector and component.
    pub fn apply_multiplier(&mut self, mult: &[C64]) {
        let l = self.sector_len();
        let dim = self.dim;
        let grid = self.grid.clone();
        for chunk in self.data.chunks_mut(l) {
            grid.apply_multiplier(chunk, dim, mult);
        }
    }

    /// Fiber vector at grid point `i` of sector `s`.
    pub fn fiber(&self, s: usize, i: usize) -> &[C64] {
        let off = s * self.sector_len() + i * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn fiber_mut(&mut self, s: usize, i: usize) -> &mut [C64] {
        let off = s * self.sector_len() + i * self.dim;
        let d = self.dim;
        &mut self.data[off..off + d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_uses_grid_spacing() {
        let g = Grid::new(16, 2.0).unwrap();
        let s = State::molecular_from_fn(&g, 2, |_| vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        assert!((s.norm_sqr() - 2.0).abs() < 1e-14);
        let t = s.clone().normalized();
        assert!((t.norm() - 1.0).abs() < 1e-14);
        assert!((s.inner(&t).re - 2.0f64.sqrt()).abs() < 1e-14);
    }
}

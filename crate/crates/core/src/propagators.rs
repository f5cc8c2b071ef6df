//! Molecular Hamiltonian `H = -eps^2 d^2 + H_el(x)`, its band diagonal and Born-Oppenheimer
//! reductions, and the propagators `exp(-i (t / eps) H)` in macroscopic time `t`.

use std::sync::Arc;

use serde::Serialize;

use crate::bands::{hermitian_eigen, BandData};
use crate::batch::{low_energy_batch, BatchOptions, Electronic};
use crate::error::{Error, Result};
use crate::fiber::{FiberField, Mat};
use crate::grid::Grid;
use crate::krylov::{expm_krylov, KrylovOptions};
use crate::model::FiberModel;
use crate::scaling::{fit_scaling, ScalingFit};
use crate::state::State;
use crate::C64;

/// `-eps^2 d^2 + H_el(x)` acting on molecular states (and sector by sector on dressed ones).
#[derive(Clone, Debug)]
pub struct MolecularHamiltonian {
    model: Arc<FiberModel>,
    eps: f64,
    kinetic: Vec<C64>,
}

impl MolecularHamiltonian {
    pub fn new(model: Arc<FiberModel>, eps: f64) -> Self {
        let kinetic = model.grid().wavenumbers().iter().map(|k| C64::new(eps * eps * k * k, 0.0)).collect();
        MolecularHamiltonian { model, eps, kinetic }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn model(&self) -> &FiberModel {
        &self.model
    }

    pub fn kinetic_symbol(&self) -> &[C64] {
        &self.kinetic
    }

    pub fn apply_kinetic(&self, psi: &State) -> State {
        let mut out = psi.clone();
        out.apply_multiplier(&self.kinetic);
        out
    }

    pub fn apply(&self, psi: &State) -> State {
        let mut out = self.apply_kinetic(psi);
        self.model.h_el().apply_into(psi, &mut out, C64::new(1.0, 0.0));
        out
    }
}

#[derive(Clone, Debug)]
pub struct StrangOptions {
    /// Number of steps; the default is `ceil(4096 / eps)`, i.e. a macroscopic step `t eps / 4096`.
    pub steps: Option<usize>,
    /// Repeat with doubled step counts until two runs agree to `tol`.
    pub self_check: bool,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for StrangOptions {
    fn default() -> Self {
        StrangOptions { steps: None, self_check: false, tol: 1e-8, max_halvings: 6 }
    }
}

fn strang_run(h: &MolecularHamiltonian, psi: &State, tau: f64, steps: usize) -> State {
    let dt = tau / steps as f64;
    let half: Vec<Mat> = h
        .model()
        .h_el()
        .mats()
        .iter()
        .map(|m| {
            let (vals, vecs) = hermitian_eigen(m);
            let d = vals.len();
            let mut out = Mat::zeros(d, d);
            for (l, v) in vals.iter().zip(&vecs) {
                out += v * v.adjoint() * C64::from_polar(1.0, -0.5 * dt * l);
            }
            out
        })
        .collect();
    let half = FiberField::new(h.model().dim(), half);
    let kin: Vec<C64> = h.kinetic_symbol().iter().map(|k| C64::from_polar(1.0, -dt * k.re)).collect();
    let mut w = half.apply(psi);
    for s in 0..steps {
        w.apply_multiplier(&kin);
        let v = half.apply(&w);
        w = if s + 1 == steps { v } else { half.apply(&v) };
    }
    w
}

/// `exp(-i (t / eps) H_mol) psi` by Strang splitting (half potential, kinetic, half potential).
pub fn propagate_full(model: Arc<FiberModel>, psi: &State, t: f64, eps: f64, opts: &StrangOptions) -> Result<State> {
    let h = MolecularHamiltonian::new(model, eps);
    let tau = t / eps;
    let steps = opts.steps.unwrap_or((4096.0 / eps).ceil() as usize).max(1);
    if !opts.self_check {
        return Ok(strang_run(&h, psi, tau, steps));
    }
    let mut prev = strang_run(&h, psi, tau, steps);
    let mut change = f64::INFINITY;
    for k in 1..=opts.max_halvings {
        let next = strang_run(&h, psi, tau, steps << k);
        change = next.sub(&prev).norm() / psi.norm();
        if change < opts.tol {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::StepSizeTooLarge { change, halvings: opts.max_halvings })
}

/// Band diagonal Hamiltonian `H_j = P_j H P_j + (1 - P_j) H (1 - P_j)`.
#[derive(Clone, Debug)]
pub struct DiagonalHamiltonian {
    h: MolecularHamiltonian,
    p: FiberField,
}

impl DiagonalHamiltonian {
    pub fn new(model: Arc<FiberModel>, bands: &BandData, j: usize, eps: f64) -> Self {
        DiagonalHamiltonian { h: MolecularHamiltonian::new(model, eps), p: bands.projector(j) }
    }

    pub fn projector(&self) -> &FiberField {
        &self.p
    }

    pub fn apply(&self, psi: &State) -> State {
        let inside = self.p.apply(psi);
        let outside = psi.sub(&inside);
        let hi = self.h.apply(&inside);
        let ho = self.h.apply(&outside);
        let pi = self.p.apply(&hi);
        let po = self.p.apply(&ho);
        // P H P psi + (1 - P) H (1 - P) psi
        let mut out = pi;
        out.axpy(C64::new(1.0, 0.0), &ho);
        out.axpy(C64::new(-1.0, 0.0), &po);
        out
    }

    pub fn propagate(&self, psi: &State, t: f64, opts: &KrylovOptions) -> Result<State> {
        expm_krylov(&|s: &State| self.apply(s), psi, t / self.h.eps(), opts)
    }
}

pub fn propagate_diagonal(
    model: Arc<FiberModel>,
    bands: &BandData,
    j: usize,
    psi: &State,
    t: f64,
    eps: f64,
    opts: &KrylovOptions,
) -> Result<State> {
    DiagonalHamiltonian::new(model, bands, j, eps).propagate(psi, t, opts)
}

/// Effective band Hamiltonian `eps^2 (-i d - A_j)^2 + E_j` on scalar nuclear wavefunctions,
/// written in the smooth periodic gauge of band `j`. With `born_huang` the second order term
/// `eps^2 (|d phi|^2 - A^2)` is added, which makes it the exact restriction of `H_j`.
#[derive(Clone, Debug)]
pub struct BoHamiltonian {
    grid: Grid,
    eps: f64,
    energy: Vec<f64>,
    connection: Vec<f64>,
    extra: Vec<f64>,
}

pub fn build_bo_effective(bands: &BandData, j: usize, eps: f64, born_huang: bool) -> BoHamiltonian {
    let n = bands.grid().n();
    let extra = if born_huang { bands.born_huang(j).iter().map(|v| eps * eps * v).collect() } else { vec![0.0; n] };
    BoHamiltonian {
        grid: bands.grid().clone(),
        eps,
        energy: bands.energies(j).to_vec(),
        connection: bands.smooth_connection(j),
        extra,
    }
}

impl BoHamiltonian {
    /// Replace the connection, e.g. to test gauge covariance.
    pub fn with_connection(mut self, connection: Vec<f64>) -> Self {
        self.connection = connection;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn covariant(&self, c: &State) -> State {
        // (-i d - A) c
        let mut dc = c.clone();
        dc.apply_multiplier(&self.grid.derivative_symbol(1));
        let data = dc
            .data()
            .iter()
            .zip(c.data())
            .zip(&self.connection)
            .map(|((d, v), a)| C64::new(0.0, -1.0) * d - v * a)
            .collect();
        State::from_data(&self.grid, 1, 1, data)
    }

    pub fn apply(&self, c: &State) -> State {
        let u = self.covariant(&self.covariant(c));
        let e2 = self.eps * self.eps;
        let data = u
            .data()
            .iter()
            .zip(c.data())
            .enumerate()
            .map(|(i, (w, v))| w * e2 + v * (self.energy[i] + self.extra[i]))
            .collect();
        State::from_data(&self.grid, 1, 1, data)
    }

    pub fn propagate(&self, c: &State, t: f64, opts: &KrylovOptions) -> Result<State> {
        expm_krylov(&|s: &State| self.apply(s), c, t / self.eps, opts)
    }

    /// Lowest eigenvalues from a Lanczos run over the full grid dimension.
    pub fn lowest_eigenvalues(&self, count: usize) -> Vec<f64> {
        let start = State::from_data(
            &self.grid,
            1,
            1,
            (0..self.grid.n()).map(|i| C64::new(1.0 + (i as f64 * 0.731).sin(), (i as f64 * 1.37).cos())).collect(),
        );
        crate::krylov::lanczos_lowest(&|s: &State| self.apply(s), &start, count, self.grid.n())
    }
}

/// `c(x) phi_j(x)` in the smooth gauge.
pub fn lift(bands: &BandData, j: usize, c: &State) -> State {
    let vs = bands.smooth_vectors(j);
    let d = bands.dim();
    let mut out = State::zeros(bands.grid(), d, 1);
    for i in 0..bands.grid().n() {
        let f = out.fiber_mut(0, i);
        for a in 0..d {
            f[a] = c.data()[i] * vs[i][a];
        }
    }
    out
}

/// `<phi_j(x), psi(x)>` in the smooth gauge.
pub fn project_coefficient(bands: &BandData, j: usize, psi: &State) -> State {
    let vs = bands.smooth_vectors(j);
    let data = (0..bands.grid().n())
        .map(|i| psi.fiber(0, i).iter().zip(vs[i].iter()).map(|(p, v)| v.conj() * p).sum())
        .collect();
    State::from_data(bands.grid(), 1, 1, data)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanResult {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub fit: ScalingFit,
}

#[derive(Clone, Debug)]
pub struct ScanSetup {
    pub band: usize,
    pub t: f64,
    pub batch: BatchOptions,
    pub seed: u64,
    pub strang: StrangOptions,
    pub krylov: KrylovOptions,
}

impl Default for ScanSetup {
    fn default() -> Self {
        ScanSetup {
            band: 0,
            t: 1.0,
            batch: BatchOptions::default(),
            seed: 0,
            strang: StrangOptions::default(),
            krylov: KrylovOptions::default(),
        }
    }
}

/// `sup_psi |(U_full - U_diag) psi|` over low energy packets of band `j` for every `eps`.
pub fn adiabatic_error_scan(model: Arc<FiberModel>, bands: &BandData, ladder: &[f64], setup: &ScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let batch = low_energy_batch(bands, eps, Electronic::Band(setup.band), &setup.batch, setup.seed, "adiabatic");
        let hd = DiagonalHamiltonian::new(model.clone(), bands, setup.band, eps);
        let mut worst: f64 = 0.0;
        for psi in &batch {
            let full = propagate_full(model.clone(), psi, setup.t, eps, &setup.strang)?;
            let diag = hd.propagate(psi, setup.t, &setup.krylov)?;
            worst = worst.max(full.sub(&diag).norm());
        }
        values.push(worst);
    }
    let fit = fit_scaling(ladder, &values)?;
    Ok(ScanResult { eps: ladder.to_vec(), values, fit })
}

/// `sup_psi |U_diag psi - lift(U_BO c)|` for packets `psi = c phi_j`, without the Born-Huang term.
pub fn bo_vs_diagonal_scan(model: Arc<FiberModel>, bands: &BandData, ladder: &[f64], setup: &ScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let batch = low_energy_batch(bands, eps, Electronic::Band(setup.band), &setup.batch, setup.seed, "bo");
        let hd = DiagonalHamiltonian::new(model.clone(), bands, setup.band, eps);
        let bo = build_bo_effective(bands, setup.band, eps, false);
        let mut worst: f64 = 0.0;
        for psi in &batch {
            let c = project_coefficient(bands, setup.band, psi);
            let psi0 = lift(bands, setup.band, &c);
            let diag = hd.propagate(&psi0, setup.t, &setup.krylov)?;
            let red = lift(bands, setup.band, &bo.propagate(&c, setup.t, &setup.krylov)?);
            worst = worst.max(diag.sub(&red).norm() / psi0.norm());
        }
        values.push(worst);
    }
    let fit = fit_scaling(ladder, &values)?;
    Ok(ScanResult { eps: ladder.to_vec(), values, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{diagonalize_bands, BandOptions};
    use crate::dense::{expm_hermitian, to_dense};
    use crate::model::RotationParams;

    fn setup(n: usize) -> (Arc<FiberModel>, BandData) {
        let g = Grid::new(n, 2.0 * std::f64::consts::PI).unwrap();
        let m = FiberModel::rotation(&g, &RotationParams::default()).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        (Arc::new(m), b)
    }

    #[test]
    fn strang_matches_dense_exponential() {
        let (m, b) = setup(64);
        let eps = 0.125;
        let psi = crate::batch::wavepacket(&b, &[(0, C64::new(1.0, 0.0))], 2.0, 0.5, 0.5, eps);
        let h = MolecularHamiltonian::new(m.clone(), eps);
        let dense = to_dense(&|s: &State| h.apply(s), m.grid(), 2, 1);
        let exact = crate::dense::apply_dense(&expm_hermitian(&dense, 1.0 / eps), &psi);
        let split = propagate_full(m.clone(), &psi, 1.0, eps, &StrangOptions::default()).unwrap();
        assert!(split.sub(&exact).norm() < 1e-6);
        assert!((split.norm() - 1.0).abs() < 1e-9);
        // second order: halving the step cuts the error at least by 3.5
        let e1 = propagate_full(m.clone(), &psi, 1.0, eps, &StrangOptions { steps: Some(64), ..Default::default() })
            .unwrap()
            .sub(&exact)
            .norm();
        let e2 = propagate_full(m, &psi, 1.0, eps, &StrangOptions { steps: Some(128), ..Default::default() })
            .unwrap()
            .sub(&exact)
            .norm();
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn diagonal_hamiltonian_commutes_with_projection() {
        let (m, b) = setup(64);
        let eps = 0.0625;
        let hd = DiagonalHamiltonian::new(m, &b, 0, eps);
        let psi = crate::batch::wavepacket(&b, &[(0, C64::new(0.6, 0.0)), (1, C64::new(0.0, 0.8))], 1.0, 0.3, 0.4, eps);
        let a = hd.apply(&hd.projector().apply(&psi));
        let c = hd.projector().apply(&hd.apply(&psi));
        assert!(a.sub(&c).norm() < 1e-11);
        let only = crate::batch::wavepacket(&b, &[(0, C64::new(1.0, 0.0))], 1.0, 0.3, 0.4, eps);
        let out = hd.propagate(&only, 1.0, &KrylovOptions::default()).unwrap();
        let leak = out.sub(&hd.projector().apply(&out)).norm();
        assert!(leak < 1e-9);
    }

    #[test]
    fn bo_hamiltonian_is_hermitian_and_gauge_covariant() {
        let (_, b) = setup(128);
        let eps = 0.0625;
        let bo = build_bo_effective(&b, 1, eps, false);
        let dense = to_dense(&|s: &State| bo.apply(s), b.grid(), 1, 1);
        assert!((&dense - dense.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-12);
        let gamma = |x: f64| 0.7 * x.sin() + 0.2 * (2.0 * x).cos();
        let rb = b.rephased(1, gamma);
        let bo2 = build_bo_effective(&rb, 1, eps, false);
        let l1 = bo.lowest_eigenvalues(10);
        let l2 = bo2.lowest_eigenvalues(10);
        for (x, y) in l1.iter().zip(&l2) {
            assert!((x - y).abs() < 1e-9, "{x} {y}");
        }
    }
}

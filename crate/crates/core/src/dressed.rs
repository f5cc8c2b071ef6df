//! One-photon truncated field: photon modes, the coupling `H_1`, the dressing operator
//! `T_delta`, the dressed vacuum projection and the leading order transition amplitude.
//!
//! Dressed states are [`State`]s with `1 + M` sectors: sector 0 is the photon vacuum, sector
//! `1 + m` holds one photon in mode `m`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bands::{hermitian_eigen, BandData};
use crate::batch::{batch_sup, low_energy_batch, BatchOptions, Electronic};
use crate::error::{Error, Result};
use crate::fiber::{FiberField, Mat};
use crate::krylov::{expm_krylov, KrylovOptions};
use crate::model::FiberModel;
use crate::propagators::{DiagonalHamiltonian, MolecularHamiltonian, ScanResult};
use crate::scaling::{fit_scaling, ScalingFit};
use crate::state::State;
use crate::superadiabatic::{build_projection, Purified};
use crate::C64;

const RESONANCE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureScheme {
    UniformMidpoint,
    GaussLegendre,
}

/// Radial photon modes `0 < k_1 < ... < k_M <= cutoff` with quadrature weights for `dk`.
#[derive(Clone, Debug)]
pub struct PhotonModes {
    cutoff: f64,
    scheme: QuadratureScheme,
    k: Vec<f64>,
    w: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, nodes increasing.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for l in 2..=n {
                let p2 = ((2 * l - 1) as f64 * z * p1 - (l - 1) as f64 * p0) / l as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

impl PhotonModes {
    pub fn new(cutoff: f64, count: usize, scheme: QuadratureScheme) -> Result<Self> {
        if count < 8 {
            return Err(Error::Validation(format!("at least 8 photon modes required, got {count}")));
        }
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::Validation(format!("photon cutoff must be positive, got {cutoff}")));
        }
        let (k, w) = match scheme {
            QuadratureScheme::UniformMidpoint => {
                let h = cutoff / count as f64;
                ((0..count).map(|m| (m as f64 + 0.5) * h).collect(), vec![h; count])
            }
            QuadratureScheme::GaussLegendre => {
                let (x, w) = gauss_legendre(count);
                (x.iter().map(|x| 0.5 * cutoff * (x + 1.0)).collect(), w.iter().map(|w| 0.5 * cutoff * w).collect())
            }
        };
        Ok(PhotonModes { cutoff, scheme, k, w })
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn scheme(&self) -> QuadratureScheme {
        self.scheme
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Mean mode spacing `cutoff / M`.
    pub fn spacing(&self) -> f64 {
        self.cutoff / self.k.len() as f64
    }

    /// Sharp cutoff form factor `(2 pi)^{-3/2}` on `[0, cutoff]`.
    pub fn form_factor(&self, k: f64) -> f64 {
        if (0.0..=self.cutoff).contains(&k) {
            (2.0 * PI).powf(-1.5)
        } else {
            0.0
        }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.k.iter().zip(&self.w).map(|(k, w)| w * f(*k)).sum()
    }

    /// Smallest `|k_m - gap(x)|`; fails if a mode sits exactly on a transition energy.
    pub fn check_resonance(&self, gaps: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        let mut at = (0.0, 0.0);
        for &g in gaps {
            for &k in &self.k {
                let d = (k - g).abs();
                if d < best {
                    best = d;
                    at = (k, g);
                }
            }
        }
        if best < RESONANCE_TOL {
            return Err(Error::ResonantMode { k: at.0, gap: at.1 });
        }
        log::debug!("closest mode to resonance: k = {} at gap {} (offset {best:e})", at.0, at.1);
        Ok(best)
    }
}

/// Squared radial coupling density `kappa(k)^2 = 2 k / (3 pi)` of the velocity form coupling
/// `C = i [H_el, mu]`. With it the golden rule rate `2 pi kappa(dE)^2 |<i|C|j>|^2` equals
/// `(4/3) dE^3 |D|^2`.
pub fn kappa_sq(k: f64) -> f64 {
    2.0 * k / (3.0 * PI)
}

/// Continuum rate `(4/3) dE^3 |D|^2`.
pub fn golden_rule_rate(delta_e: f64, dipole: f64) -> f64 {
    4.0 / 3.0 * delta_e.powi(3) * dipole * dipole
}

/// `gamma / pi / (x^2 + gamma^2)`
pub fn lorentzian(x: f64, gamma: f64) -> f64 {
    gamma / PI / (x * x + gamma * gamma)
}

/// Electronic side of `H_1`: `sum_m g_m (a_m^* + a_m) C(x)` with `g_m = kappa(k_m) sqrt(w_m)`.
#[derive(Clone, Debug)]
pub struct Coupling {
    modes: Arc<PhotonModes>,
    g: Vec<f64>,
    c: FiberField,
}

impl Coupling {
    pub fn new(model: &FiberModel, modes: Arc<PhotonModes>) -> Self {
        let g = modes.k().iter().zip(modes.w()).map(|(k, w)| (kappa_sq(*k) * w).sqrt()).collect();
        let c = model.h_el().commutator(model.mu()).scale(C64::new(0.0, 1.0));
        Coupling { modes, g, c }
    }

    pub fn with_weights(mut self, g: Vec<f64>) -> Self {
        assert_eq!(g.len(), self.modes.len());
        self.g = g;
        self
    }

    pub fn modes(&self) -> &PhotonModes {
        &self.modes
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    /// `C(x) = i [H_el(x), mu(x)]`
    pub fn c(&self) -> &FiberField {
        &self.c
    }

    /// Golden rule rate of the discrete model for a level pair with energy difference
    /// `delta_e` and dipole `|D|`, each mode broadened to a Lorentzian of width `gamma`.
    pub fn discrete_rate(&self, delta_e: f64, dipole: f64, gamma: f64) -> f64 {
        self.modes
            .k()
            .iter()
            .zip(&self.g)
            .map(|(k, g)| 2.0 * PI * g * g * (delta_e * dipole).powi(2) * lorentzian(k - delta_e, gamma))
            .sum()
    }
}

/// Coupling strength, shift and exponents of the dressing construction.
#[derive(Clone, Debug, Serialize)]
pub struct DressingParams {
    pub eps: f64,
    pub beta: f64,
    pub delta: f64,
    /// prefactor of `H_1`, `eps^{3 beta / 2}` unless overridden
    pub strength: f64,
}

/// Exponent `e` of the default shift `delta = eps^e`.
pub fn delta_exponent(beta: f64) -> f64 {
    0.5 - (beta - 5.0 / 6.0) / 5.0
}

pub fn beta_admissible(beta: f64) -> bool {
    beta > 5.0 / 6.0 && beta <= 4.0 / 3.0
}

impl DressingParams {
    pub fn new(eps: f64, beta: f64) -> Self {
        DressingParams { eps, beta, delta: eps.powf(delta_exponent(beta)), strength: eps.powf(1.5 * beta) }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }

    pub fn validate(&self, unsafe_beta: bool) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Validation(format!("eps = {} not in (0, 1)", self.eps)));
        }
        if !unsafe_beta && !beta_admissible(self.beta) {
            return Err(Error::Validation(format!("beta = {} outside (5/6, 4/3]", self.beta)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Validation(format!("delta = {} must be positive", self.delta)));
        }
        if !unsafe_beta && self.delta < self.eps.sqrt() * (1.0 - 1e-12) {
            return Err(Error::Validation(format!("delta = {} below sqrt(eps) = {}", self.delta, self.eps.sqrt())));
        }
        Ok(())
    }

    /// Probability prefactor `strength^2 / eps`, equal to `eps^{3 beta - 1}` by default.
    pub fn probability_prefactor(&self) -> f64 {
        self.strength * self.strength / self.eps
    }
}

/// `H = H_mol + H_f + strength * H_1` on the vacuum and one-photon sectors.
#[derive(Clone, Debug)]
pub struct DressedHamiltonian {
    mol: MolecularHamiltonian,
    coupling: Arc<Coupling>,
    strength: f64,
}

impl DressedHamiltonian {
    pub fn new(model: Arc<FiberModel>, coupling: Arc<Coupling>, eps: f64, strength: f64) -> Self {
        DressedHamiltonian { mol: MolecularHamiltonian::new(model, eps), coupling, strength }
    }

    pub fn eps(&self) -> f64 {
        self.mol.eps()
    }

    pub fn sectors(&self) -> usize {
        1 + self.coupling.modes().len()
    }

    pub fn vacuum(&self, psi: &State) -> State {
        let mut out = State::zeros(psi.grid(), psi.dim(), self.sectors());
        out.set_sector(0, psi);
        out
    }

    /// Unscaled `H_1`: vacuum receives `sum_m g_m C psi_m`, mode `m` receives `g_m C psi_0`.
    /// The two-photon part created from the one-photon sectors is dropped.
    pub fn apply_h1(&self, psi: &State) -> State {
        let g = self.coupling.g();
        let cpsi = self.coupling.c().apply(psi);
        let mut out = psi.zeros_like();
        let vac = cpsi.sector_state(0);
        for (m, gm) in g.iter().enumerate() {
            let target = out.sector_mut(1 + m);
            for (o, v) in target.iter_mut().zip(vac.data()) {
                *o = v * gm;
            }
        }
        let mut acc = State::zeros(psi.grid(), psi.dim(), 1);
        for (m, gm) in g.iter().enumerate() {
            acc.axpy(C64::new(*gm, 0.0), &cpsi.sector_state(1 + m));
        }
        out.set_sector(0, &acc);
        out
    }

    /// Norm squared of the two-photon component that `strength * H_1` would create.
    pub fn dropped_weight(&self, psi: &State) -> f64 {
        let cpsi = self.coupling.c().apply(psi);
        let one: f64 = (1..psi.sectors()).map(|s| cpsi.sector_norm_sqr(s)).sum();
        let gsum: f64 = self.coupling.g().iter().map(|g| g * g).sum();
        self.strength * self.strength * gsum * one
    }

    pub fn apply(&self, psi: &State) -> State {
        let mut out = self.mol.apply(psi);
        for (m, k) in self.coupling.modes().k().iter().enumerate() {
            let src: Vec<C64> = psi.sector(1 + m).to_vec();
            for (o, v) in out.sector_mut(1 + m).iter_mut().zip(&src) {
                *o += v * k;
            }
        }
        if self.strength != 0.0 {
            out.axpy(C64::new(self.strength, 0.0), &self.apply_h1(psi));
        }
        out
    }

    /// `exp(-i (t / eps) H) psi`
    pub fn propagate(&self, psi: &State, t: f64, opts: &KrylovOptions) -> Result<State> {
        expm_krylov(&|s: &State| self.apply(s), psi, t / self.eps(), opts)
    }
}

/// `(k + H_el(x) - E_j(x) + i delta)^{-1}` at grid point `i`.
fn mode_resolvent(bands: &BandData, j: usize, i: usize, k: f64, delta: f64) -> Mat {
    let d = bands.dim();
    let ej = bands.energies(j)[i];
    let mut r = Mat::zeros(d, d);
    for b in 0..d {
        let v = bands.vector(b, i);
        r += v * v.adjoint() / C64::new(k + bands.energies(b)[i] - ej, delta);
    }
    r
}

/// `T_delta = -(H_f + H_el - E_j + i delta)^{-1} H_1 (P_j (x) Q_0)`, a fiberwise map from the
/// vacuum sector to the one-photon sectors.
#[derive(Clone, Debug)]
pub struct DressingOperator {
    band: usize,
    delta: f64,
    dim: usize,
    /// `mats[m][i]`
    mats: Vec<Vec<Mat>>,
    /// x derivative of `mats`
    dmats: Vec<Vec<Mat>>,
}

impl DressingOperator {
    pub fn new(model: &FiberModel, bands: &BandData, coupling: &Coupling, j: usize, delta: f64) -> Self {
        let grid = bands.grid();
        let n = grid.n();
        let d = bands.dim();
        let pj = bands.projector(j);
        let cp = coupling.c().mul(&pj);
        let dcp = cp.derivative(grid, 1);
        let dh = model.h_el().derivative(grid, 1);
        let de = grid.derivative_real(bands.energies(j), 1);
        let mut mats = Vec::with_capacity(coupling.modes().len());
        let mut dmats = Vec::with_capacity(coupling.modes().len());
        for (k, g) in coupling.modes().k().iter().zip(coupling.g()) {
            let mut row = Vec::with_capacity(n);
            let mut drow = Vec::with_capacity(n);
            for i in 0..n {
                let r = mode_resolvent(bands, j, i, *k, delta);
                let t = -(&r * cp.at(i)) * C64::new(*g, 0.0);
                let shift = dh.at(i) - Mat::identity(d, d) * C64::new(de[i], 0.0);
                let dt = (&r * shift * &r * cp.at(i) - &r * dcp.at(i)) * C64::new(*g, 0.0);
                row.push(t);
                drow.push(dt);
            }
            mats.push(row);
            dmats.push(drow);
        }
        DressingOperator { band: j, delta, dim: d, mats, dmats }
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Fiber matrix of mode `m` at grid point `i`.
    pub fn at(&self, m: usize, i: usize) -> &Mat {
        &self.mats[m][i]
    }

    /// `T psi`: reads the vacuum sector, fills the one-photon sectors.
    pub fn apply(&self, psi: &State) -> State {
        let mut out = psi.zeros_like();
        let n = psi.grid().n();
        for (m, row) in self.mats.iter().enumerate() {
            for i in 0..n {
                let v = nalgebra::DVector::from_column_slice(psi.fiber(0, i));
                let w = &row[i] * v;
                out.fiber_mut(1 + m, i).copy_from_slice(w.as_slice());
            }
        }
        out
    }

    /// `T^* psi`: reads the one-photon sectors, fills the vacuum sector.
    pub fn apply_adjoint(&self, psi: &State) -> State {
        let mut out = psi.zeros_like();
        let n = psi.grid().n();
        for (m, row) in self.mats.iter().enumerate() {
            for i in 0..n {
                let v = nalgebra::DVector::from_column_slice(psi.fiber(1 + m, i));
                let w = row[i].adjoint() * v;
                for (o, x) in out.fiber_mut(0, i).iter_mut().zip(w.iter()) {
                    *o += x;
                }
            }
        }
        out
    }

    fn fiber_sup(&self, mats: &[Vec<Mat>]) -> f64 {
        let n = mats.first().map_or(0, |r| r.len());
        let mut best: f64 = 0.0;
        for i in 0..n {
            let mut gram = Mat::zeros(self.dim, self.dim);
            for row in mats {
                gram += row[i].adjoint() * &row[i];
            }
            let (vals, _) = hermitian_eigen(&gram);
            best = best.max(vals.last().copied().unwrap_or(0.0));
        }
        best.max(0.0).sqrt()
    }

    /// Exact operator norm `sup_x |sum_m T_m(x)^* T_m(x)|^{1/2}`.
    pub fn norm(&self) -> f64 {
        self.fiber_sup(&self.mats)
    }

    /// Operator norm of the x derivative of `T`.
    pub fn gradient_norm(&self) -> f64 {
        self.fiber_sup(&self.dmats)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaScan {
    pub deltas: Vec<f64>,
    pub norms: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub norm_fit: ScalingFit,
    pub gradient_fit: ScalingFit,
}

/// `|T_delta|` and `|d T_delta|` along a ladder of shifts.
pub fn t_delta_scan(model: &FiberModel, bands: &BandData, coupling: &Coupling, j: usize, deltas: &[f64]) -> Result<DeltaScan> {
    let mut norms = Vec::new();
    let mut gradient_norms = Vec::new();
    for &delta in deltas {
        let t = DressingOperator::new(model, bands, coupling, j, delta);
        norms.push(t.norm());
        gradient_norms.push(t.gradient_norm());
    }
    Ok(DeltaScan {
        deltas: deltas.to_vec(),
        norm_fit: fit_scaling(deltas, &norms)?,
        gradient_fit: fit_scaling(deltas, &gradient_norms)?,
        norms,
        gradient_norms,
    })
}

/// Dressed vacuum projection built from `P~ = P^eps (x) Q_0 + strength (T + T^*)`.
#[derive(Clone, Debug)]
pub struct DressedVacuum {
    projection: Arc<Purified>,
    t: DressingOperator,
    strength: f64,
    levels: usize,
}

impl DressedVacuum {
    /// `projection` is the purified superadiabatic projection of the band on the molecular
    /// sector; `defect` the measured idempotency defect of `P~`, which fixes the number of
    /// polynomial purification levels.
    pub fn new(projection: Arc<Purified>, t: DressingOperator, strength: f64) -> Self {
        DressedVacuum { projection, t, strength, levels: 0 }
    }

    pub fn dressing(&self) -> &DressingOperator {
        &self.t
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// `P^eps (x) Q_0`
    pub fn apply_bare(&self, psi: &State) -> State {
        let mut out = psi.zeros_like();
        out.set_sector(0, &self.projection.apply(&psi.sector_state(0)));
        out
    }

    /// The almost projection `P~`.
    pub fn apply_almost(&self, psi: &State) -> State {
        let mut out = self.apply_bare(psi);
        if self.strength != 0.0 {
            let a = C64::new(self.strength, 0.0);
            out.axpy(a, &self.t.apply(psi));
            out.axpy(a, &self.t.apply_adjoint(psi));
        }
        out
    }

    /// Number of Newton-Schulz levels `Q <- 3 Q^2 - 2 Q^3` needed to bring `defect` below `tol`.
    pub fn levels_for(defect: f64, tol: f64) -> Result<usize> {
        if !(defect < 0.25) {
            return Err(Error::DefectTooLarge { defect });
        }
        let mut d = defect;
        let mut k = 0;
        while d > tol {
            // defect of 3x^2 - 2x^3 near x = 0 or 1 is about 3 d^2 (1 + 4 d)
            d = 3.0 * d * d * (1.0 + 4.0 * d);
            k += 1;
            if k > 8 {
                return Err(Error::Convergence("polynomial purification needs more than 8 levels".into()));
            }
        }
        Ok(k)
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    fn level(&self, l: usize, psi: &State) -> State {
        if l == 0 {
            return self.apply_almost(psi);
        }
        let a = self.level(l - 1, psi);
        let b = self.level(l - 1, &a);
        let c = self.level(l - 1, &b);
        let mut out = b;
        out.scale(C64::new(3.0, 0.0));
        out.axpy(C64::new(-2.0, 0.0), &c);
        out
    }

    /// The purified projection `P_vac`, applied matrix free (`3^levels` applications of `P~`).
    pub fn apply(&self, psi: &State) -> State {
        self.level(self.levels, psi)
    }
}

/// Build the dressed vacuum of band `j` for one `eps`, purifying to `1e-13`.
pub fn build_dressed_vacuum(
    model: &FiberModel,
    bands: &BandData,
    coupling: &Coupling,
    j: usize,
    params: &DressingParams,
    batch: &BatchOptions,
    seed: u64,
) -> Result<DressedVacuum> {
    let proj = build_projection(model, bands, j, params.eps, 2, batch, seed)?;
    let t = DressingOperator::new(model, bands, coupling, j, params.delta);
    let dv = DressedVacuum::new(proj.purified.clone(), t, params.strength);
    // defect bound strength^2 |T|^2 + 2 strength |T| |P^eps - P_j| with |P^eps - P_j| ~ eps
    let tn = params.strength * dv.t.norm();
    let defect = tn * tn + 2.0 * tn * params.eps;
    let levels = DressedVacuum::levels_for(defect, 1e-13)?;
    Ok(dv.with_levels(levels + 1))
}

#[derive(Clone, Debug, Serialize)]
pub struct DressedScan {
    pub distance: ScanResult,
    pub defect: ScanResult,
}

fn vacuum_batch(bands: &BandData, eps: f64, j: usize, sectors: usize, batch: &BatchOptions, seed: u64, tag: &str) -> Vec<State> {
    low_energy_batch(bands, eps, Electronic::Band(j), batch, seed, tag)
        .into_iter()
        .map(|psi| {
            let mut out = State::zeros(psi.grid(), psi.dim(), sectors);
            out.set_sector(0, &psi);
            out
        })
        .collect()
}

/// `sup |(P_vac - P^eps (x) Q_0) psi|` and `sup |(P~^2 - P~) psi|` over normalised vacuum
/// states `psi` in the range of `P^eps (x) Q_0`, along an `eps` ladder with `delta(eps)`.
pub fn dressed_projection_scan(
    model: &FiberModel,
    bands: &BandData,
    coupling: &Coupling,
    j: usize,
    ladder: &[f64],
    beta: f64,
    batch: &BatchOptions,
    seed: u64,
) -> Result<DressedScan> {
    let sectors = 1 + coupling.modes().len();
    let mut distance = Vec::new();
    let mut defect = Vec::new();
    for &eps in ladder {
        let params = DressingParams::new(eps, beta);
        let dv = build_dressed_vacuum(model, bands, coupling, j, &params, batch, seed)?;
        let states: Vec<State> = vacuum_batch(bands, eps, j, sectors, batch, seed, "dressed")
            .into_iter()
            .map(|psi| dv.apply_bare(&psi).normalized())
            .collect();
        distance.push(batch_sup(&states, |psi| Ok(dv.apply(psi).sub(&dv.apply_bare(psi)).norm()))?);
        defect.push(batch_sup(&states, |psi| {
            let a = dv.apply_almost(psi);
            Ok(dv.apply_almost(&a).sub(&a).norm())
        })?);
        log::info!("dressed scan eps = {eps}: distance {:e}, defect {:e}", distance.last().unwrap(), defect.last().unwrap());
    }
    Ok(DressedScan {
        distance: ScanResult { eps: ladder.to_vec(), fit: fit_scaling(ladder, &distance)?, values: distance },
        defect: ScanResult { eps: ladder.to_vec(), fit: fit_scaling(ladder, &defect)?, values: defect },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CommutatorScan {
    pub commutator: ScanResult,
    /// after subtracting the leading term `-i delta strength T`
    pub residual: ScanResult,
}

/// `sup |[H, P~] psi|` over low energy vacuum states of band `j`, and the same quantity after
/// removing the leading term `i delta strength T psi`.
pub fn commutator_dressed_scan(
    model: Arc<FiberModel>,
    bands: &BandData,
    coupling: Arc<Coupling>,
    j: usize,
    ladder: &[f64],
    beta: f64,
    batch: &BatchOptions,
    seed: u64,
) -> Result<CommutatorScan> {
    let sectors = 1 + coupling.modes().len();
    let mut comm = Vec::new();
    let mut resid = Vec::new();
    for &eps in ladder {
        let params = DressingParams::new(eps, beta);
        let dv = build_dressed_vacuum(&model, bands, &coupling, j, &params, batch, seed)?;
        let h = DressedHamiltonian::new(model.clone(), coupling.clone(), eps, params.strength);
        let states = vacuum_batch(bands, eps, j, sectors, batch, seed, "dressed-commutator");
        let mut worst: f64 = 0.0;
        let mut worst_res: f64 = 0.0;
        for psi in &states {
            let c = h.apply(&dv.apply_almost(psi)).sub(&dv.apply_almost(&h.apply(psi)));
            let mut r = c.clone();
            r.axpy(C64::new(0.0, -params.delta * params.strength), &dv.t.apply(psi));
            worst = worst.max(c.norm() / psi.norm());
            worst_res = worst_res.max(r.norm() / psi.norm());
        }
        comm.push(worst);
        resid.push(worst_res);
    }
    Ok(CommutatorScan {
        commutator: ScanResult { eps: ladder.to_vec(), fit: fit_scaling(ladder, &comm)?, values: comm },
        residual: ScanResult { eps: ladder.to_vec(), fit: fit_scaling(ladder, &resid)?, values: resid },
    })
}

/// Leading order transition operator from band `j` (vacuum) to band `i` with one photon.
///
/// Mode `m` carries `(delta / sqrt(eps)) g_m Delta(x) / (k_m - Delta(x) + i delta) P_i mu P_j`
/// with `Delta = E_j - E_i`; the optional gradient term adds
/// `2 sqrt(eps) (-Delta'(x)) g_m / (k_m - Delta(x) + i delta)^2 P_i C P_j (eps d)`.
#[derive(Clone, Debug)]
pub struct TransitionOperator {
    eps: f64,
    pmu: FiberField,
    kernels: Vec<Vec<C64>>,
    gradient: Option<(FiberField, Vec<Vec<C64>>)>,
}

impl TransitionOperator {
    pub fn new(
        model: &FiberModel,
        bands: &BandData,
        coupling: &Coupling,
        i: usize,
        j: usize,
        params: &DressingParams,
        with_t2: bool,
    ) -> Result<Self> {
        let grid = bands.grid();
        let gap: Vec<f64> = bands.energies(j).iter().zip(bands.energies(i)).map(|(a, b)| a - b).collect();
        if let Some((k, g)) = gap.iter().enumerate().find(|(_, g)| **g <= 0.0) {
            return Err(Error::WrongSign { x: grid.x(k), gap: *g });
        }
        coupling.modes().check_resonance(&gap)?;
        let pi = bands.projector(i);
        let pj = bands.projector(j);
        let pmu = pi.mul(model.mu()).mul(&pj);
        let eps = params.eps;
        let delta = params.delta;
        let kernels = coupling
            .modes()
            .k()
            .iter()
            .zip(coupling.g())
            .map(|(k, g)| {
                gap.iter().map(|d| C64::new(delta / eps.sqrt() * g * d, 0.0) / C64::new(k - d, delta)).collect()
            })
            .collect();
        let gradient = with_t2.then(|| {
            let dgap = grid.derivative_real(&gap, 1);
            let pcp = pi.mul(coupling.c()).mul(&pj);
            let ker = coupling
                .modes()
                .k()
                .iter()
                .zip(coupling.g())
                .map(|(k, g)| {
                    gap.iter()
                        .zip(&dgap)
                        .map(|(d, dd)| {
                            let den = C64::new(k - d, delta);
                            C64::new(-2.0 * eps.sqrt() * dd * g, 0.0) / (den * den)
                        })
                        .collect()
                })
                .collect();
            (pcp, ker)
        });
        Ok(TransitionOperator { eps, pmu, kernels, gradient })
    }

    pub fn modes(&self) -> usize {
        self.kernels.len()
    }

    /// Maps a molecular state to the `M` one-photon components (returned as an `M` sector state).
    pub fn apply(&self, psi: &State) -> State {
        let grid = psi.grid();
        let d = psi.dim();
        let n = grid.n();
        let base = self.pmu.apply(psi);
        let grad = self.gradient.as_ref().map(|(pcp, ker)| {
            let mut dpsi = psi.clone();
            let sym: Vec<C64> = grid.wavenumbers().iter().map(|k| C64::new(0.0, self.eps * k)).collect();
            dpsi.apply_multiplier(&sym);
            (pcp.apply(&dpsi), ker)
        });
        let mut out = State::zeros(grid, d, self.kernels.len());
        for (m, ker) in self.kernels.iter().enumerate() {
            for i in 0..n {
                let b = base.fiber(0, i).to_vec();
                let g = grad.as_ref().map(|(s, k)| (s.fiber(0, i).to_vec(), k[m][i]));
                let o = out.fiber_mut(m, i);
                for a in 0..d {
                    o[a] = ker[i] * b[a];
                    if let Some((gv, gk)) = &g {
                        o[a] += gk * gv[a];
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DysonOptions {
    /// Midpoint steps; default `64 t / eps`.
    pub steps: Option<usize>,
    /// Repeat with doubled steps and require agreement to 1%.
    pub check_doubling: bool,
    pub with_t2: bool,
    pub krylov: KrylovOptions,
}

impl Default for DysonOptions {
    fn default() -> Self {
        DysonOptions { steps: None, check_doubling: true, with_t2: false, krylov: KrylovOptions::default() }
    }
}

#[derive(Clone, Debug)]
pub struct DysonResult {
    /// one-photon components, `M` sectors
    pub amplitude: State,
    pub probability: f64,
    pub steps: usize,
    pub rel_change: Option<f64>,
}

fn dyson_run(
    hi: &DiagonalHamiltonian,
    hj: &DiagonalHamiltonian,
    top: &TransitionOperator,
    ks: &[f64],
    psi0: &State,
    t: f64,
    eps: f64,
    steps: usize,
    krylov: &KrylovOptions,
) -> Result<State> {
    let h = t / steps as f64;
    let phases: Vec<C64> = ks.iter().map(|k| C64::from_polar(1.0, -k * h / eps)).collect();
    let mut psi = hj.propagate(psi0, 0.5 * h, krylov)?;
    let mut acc: Option<State> = None;
    for s in 0..steps {
        let mut x = top.apply(&psi);
        x.scale(C64::new(h, 0.0));
        acc = Some(match acc {
            None => x,
            Some(a) => {
                let mut next = hi.propagate(&a, h, krylov)?;
                for (m, ph) in phases.iter().enumerate() {
                    for v in next.sector_mut(m) {
                        *v *= ph;
                    }
                }
                next.axpy(C64::new(1.0, 0.0), &x);
                next
            }
        });
        if s + 1 < steps {
            psi = hj.propagate(&psi, h, krylov)?;
        }
    }
    let mut out = hi.propagate(&acc.expect("at least one step"), 0.5 * h, krylov)?;
    let half: Vec<C64> = ks.iter().map(|k| C64::from_polar(1.0, -k * 0.5 * h / eps)).collect();
    for (m, ph) in half.iter().enumerate() {
        for v in out.sector_mut(m) {
            *v *= ph;
        }
    }
    Ok(out)
}

/// `int_0^t exp(-i (t - s)/eps H_{i,field}) T_{j->i} exp(-i s/eps H_j) psi0 ds` by the composite
/// midpoint rule; the transition probability is `strength^2 / eps` times its norm squared.
#[allow(clippy::too_many_arguments)]
pub fn dyson_transition(
    model: Arc<FiberModel>,
    bands: &BandData,
    coupling: &Coupling,
    i: usize,
    j: usize,
    psi0: &State,
    t: f64,
    params: &DressingParams,
    opts: &DysonOptions,
) -> Result<DysonResult> {
    let m = coupling.modes().len();
    if t == 0.0 {
        return Ok(DysonResult { amplitude: State::zeros(psi0.grid(), psi0.dim(), m), probability: 0.0, steps: 0, rel_change: None });
    }
    let top = TransitionOperator::new(&model, bands, coupling, i, j, params, opts.with_t2)?;
    let eps = params.eps;
    let hi = DiagonalHamiltonian::new(model.clone(), bands, i, eps);
    let hj = DiagonalHamiltonian::new(model, bands, j, eps);
    let steps = opts.steps.unwrap_or((64.0 * t / eps).ceil() as usize).max(1);
    let ks = coupling.modes().k();
    let amp = dyson_run(&hi, &hj, &top, ks, psi0, t, eps, steps, &opts.krylov)?;
    let pref = params.probability_prefactor();
    let probability = pref * amp.norm_sqr();
    if !opts.check_doubling {
        return Ok(DysonResult { amplitude: amp, probability, steps, rel_change: None });
    }
    let fine = dyson_run(&hi, &hj, &top, ks, psi0, t, eps, 2 * steps, &opts.krylov)?;
    let p2 = pref * fine.norm_sqr();
    let rel = if p2 > 0.0 { (p2 - probability).abs() / p2 } else { 0.0 };
    if rel > 0.01 {
        return Err(Error::QuadratureNotConverged { rel_change: rel });
    }
    Ok(DysonResult { amplitude: fine, probability: p2, steps: 2 * steps, rel_change: Some(rel) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{diagonalize_bands, BandOptions};
    use crate::grid::Grid;
    use crate::model::RotationParams;

    fn clamped(n: usize) -> (Arc<FiberModel>, BandData) {
        let g = Grid::new(n, 2.0 * PI).unwrap();
        let m = FiberModel::two_level_constant(&g, 1.0, 1.0).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        (Arc::new(m), b)
    }

    fn rotation(n: usize) -> (Arc<FiberModel>, BandData) {
        let g = Grid::new(n, 2.0 * PI).unwrap();
        let m = FiberModel::rotation(&g, &RotationParams { gap_modulation: 0.2, ..Default::default() }).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        (Arc::new(m), b)
    }

    #[test]
    fn quadratures() {
        let m = PhotonModes::new(2.0, 8, QuadratureScheme::UniformMidpoint).unwrap();
        assert!((m.k()[0] - 0.125).abs() < 1e-15 && (m.k()[1] - 0.375).abs() < 1e-15);
        assert!(m.w().iter().all(|w| (w - 0.25).abs() < 1e-15));
        let gl = PhotonModes::new(2.0, 256, QuadratureScheme::GaussLegendre).unwrap();
        assert!((gl.integrate(|k| k) - 2.0).abs() < 1e-6);
        assert!(gl.k().windows(2).all(|p| p[0] < p[1]) && gl.w().iter().all(|w| *w > 0.0));
        let g32 = PhotonModes::new(2.0, 32, QuadratureScheme::GaussLegendre).unwrap();
        assert!((g32.integrate(|k| k.powi(3)) - 4.0).abs() / 4.0 < 1e-10);
        assert!(PhotonModes::new(2.0, 4, QuadratureScheme::GaussLegendre).is_err());
    }

    #[test]
    fn resonant_mode_is_rejected() {
        let m = PhotonModes::new(2.0, 8, QuadratureScheme::UniformMidpoint).unwrap();
        assert!(matches!(m.check_resonance(&[0.375]), Err(Error::ResonantMode { .. })));
        assert!(m.check_resonance(&[0.3]).is_ok());
    }

    #[test]
    fn velocity_form_matrix_element() {
        let (m, b) = rotation(64);
        let modes = Arc::new(PhotonModes::new(4.0, 16, QuadratureScheme::UniformMidpoint).unwrap());
        let c = Coupling::new(&m, modes);
        let dip = b.dipole(0, 1, m.mu());
        for i in 0..64 {
            let lhs = b.vector(0, i).dotc(&(c.c().at(i) * b.vector(1, i)));
            let rhs = C64::new(0.0, 1.0) * (b.energies(0)[i] - b.energies(1)[i]) * dip[i];
            assert!((lhs - rhs).norm() < 1e-12);
        }
        assert!(c.c().hermitian_residual().1 < 1e-13);
    }

    #[test]
    fn h1_is_hermitian_and_creates_from_vacuum() {
        let (m, b) = rotation(32);
        let modes = Arc::new(PhotonModes::new(4.0, 8, QuadratureScheme::GaussLegendre).unwrap());
        let c = Arc::new(Coupling::new(&m, modes));
        let h = DressedHamiltonian::new(m.clone(), c.clone(), 0.1, 0.3);
        let mut rng = crate::rng::keyed_rng(3, "h1");
        use rand::Rng;
        let mut rand_state = || {
            let data = (0..32 * 2 * 9).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            State::from_data(b.grid(), 2, 9, data)
        };
        let (u, v) = (rand_state(), rand_state());
        let a = u.inner(&h.apply_h1(&v));
        let bb = v.inner(&h.apply_h1(&u)).conj();
        assert!((a - bb).norm() < 1e-11);
        let a = u.inner(&h.apply(&v));
        let bb = v.inner(&h.apply(&u)).conj();
        assert!((a - bb).norm() < 1e-10);
        let vac = h.vacuum(&u.sector_state(0));
        let out = h.apply_h1(&vac);
        assert_eq!(out.sector_norm_sqr(0), 0.0);
        assert!(out.norm() > 0.0);
        let zero = Coupling::new(&m, Arc::new(PhotonModes::new(4.0, 8, QuadratureScheme::GaussLegendre).unwrap())).with_weights(vec![0.0; 8]);
        let h0 = DressedHamiltonian::new(m, Arc::new(zero), 0.1, 0.3);
        assert_eq!(h0.apply_h1(&u).norm(), 0.0);
    }

    #[test]
    fn discrete_rate_converges_to_golden_rule() {
        let (m, _) = clamped(8);
        let exact = golden_rule_rate(1.0, 1.0);
        let mut prev: Option<f64> = None;
        for count in [512, 1024] {
            let modes = Arc::new(PhotonModes::new(4.0, count, QuadratureScheme::UniformMidpoint).unwrap());
            let c = Coupling::new(&m, modes.clone());
            let rate = c.discrete_rate(1.0, 1.0, modes.spacing());
            if count == 512 {
                assert!((rate - exact).abs() / exact < 0.01, "{rate} vs {exact}");
            }
            if let Some(p) = prev {
                assert!(((rate - p) / p).abs() < 0.01);
            }
            prev = Some(rate);
        }
    }

    #[test]
    fn dressing_operator_closed_form_and_kernel() {
        let (m, b) = clamped(16);
        let modes = Arc::new(PhotonModes::new(4.0, 16, QuadratureScheme::UniformMidpoint).unwrap());
        let c = Coupling::new(&m, modes.clone());
        let delta = 0.2;
        let t = DressingOperator::new(&m, &b, &c, 1, delta);
        let cij = b.vector(0, 0).dotc(&(c.c().at(0) * b.vector(1, 0)));
        for (mm, (k, g)) in modes.k().iter().zip(c.g()).enumerate() {
            let expect = -C64::new(*g, 0.0) / C64::new(k + 0.0 - 1.0, delta) * cij;
            let got = b.vector(0, 3).dotc(&(t.at(mm, 3) * b.vector(1, 3)));
            assert!((got - expect).norm() < 1e-11);
        }
        // annihilates the complement of band 1 in the vacuum and all photon sectors
        let lower = crate::batch::wavepacket(&b, &[(0, C64::new(1.0, 0.0))], 1.0, 0.0, 0.5, 0.1);
        let h = DressedHamiltonian::new(m, Arc::new(c), 0.1, 0.1);
        assert!(t.apply(&h.vacuum(&lower)).norm() < 1e-14);
        // adjoint
        let up = h.vacuum(&crate::batch::wavepacket(&b, &[(1, C64::new(1.0, 0.0))], 1.0, 0.0, 0.5, 0.1));
        let tu = t.apply(&up);
        let back = t.apply_adjoint(&tu);
        assert!((up.inner(&back) - tu.inner(&tu)).norm() < 1e-12);
    }

    #[test]
    fn transition_kernel_and_errors() {
        let (m, b) = clamped(16);
        let modes = Arc::new(PhotonModes::new(4.0, 16, QuadratureScheme::UniformMidpoint).unwrap());
        let c = Coupling::new(&m, modes.clone());
        let params = DressingParams::new(1.0 / 16.0, 1.0);
        let top = TransitionOperator::new(&m, &b, &c, 0, 1, &params, false).unwrap();
        let up = crate::batch::wavepacket(&b, &[(1, C64::new(1.0, 0.0))], 1.0, 0.0, 0.5, params.eps);
        let out = top.apply(&up);
        for (mm, (k, g)) in modes.k().iter().zip(c.g()).enumerate() {
            let ker = C64::new(params.delta / params.eps.sqrt() * g, 0.0) / C64::new(k - 1.0, params.delta);
            for i in 0..16 {
                // P_0 mu P_1 on (0, 1) gives (1, 0) times the upper component
                let expect = ker * up.fiber(0, i)[1];
                assert!((out.fiber(mm, i)[0] - expect).norm() < 1e-12);
                assert!(out.fiber(mm, i)[1].norm() < 1e-15);
            }
        }
        assert!(matches!(TransitionOperator::new(&m, &b, &c, 1, 0, &params, false), Err(Error::WrongSign { .. })));
        let none = FiberModel::new(m.grid().clone(), m.h_el().clone(), FiberField::zeros(16, 2)).unwrap();
        let c0 = Coupling::new(&none, modes);
        let top0 = TransitionOperator::new(&none, &b, &c0, 0, 1, &params, true).unwrap();
        assert_eq!(top0.apply(&up).norm(), 0.0);
    }

    #[test]
    fn levels_for_defect() {
        assert_eq!(DressedVacuum::levels_for(1e-14, 1e-13).unwrap(), 0);
        assert!(DressedVacuum::levels_for(0.3, 1e-13).is_err());
        assert!(DressedVacuum::levels_for(0.01, 1e-13).unwrap() <= 4);
    }
}

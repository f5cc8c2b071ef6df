//! Superadiabatic projections `P^eps = P_0 + eps P_1 + eps^2 P_2` for an isolated band and
//! their purification into true orthogonal projections.

use std::sync::Arc;

use serde::Serialize;

use crate::bands::BandData;
use crate::batch::{batch_sup, low_energy_batch, BatchOptions, Electronic};
use crate::dense::{apply_dense, hermitian_part, DenseMatrix};
use crate::diffop::Dfo;
use crate::error::{Error, Result};
use crate::model::FiberModel;
use crate::propagators::MolecularHamiltonian;
use crate::scaling::fit_scaling;
use crate::propagators::ScanResult;
use crate::state::State;
use crate::C64;

/// Relative Fourier tail above which the fiber is considered too rough for the expansion.
pub const ROUGHNESS_TOL: f64 = 1e-10;
/// Largest grid size (per fiber dimension) purified by dense diagonalisation.
pub const DENSE_PURIFY_MAX_POINTS: usize = 512;

/// `[P_0] = -eps (d^2 P_0) - 2 (d P_0)(eps d)` in normal ordered form; equals
/// `(1/eps)[H_mol, P_0]` up to spectrally small aliasing.
pub fn bracket_p0(bands: &BandData, j: usize, eps: f64) -> Dfo {
    let g = bands.grid();
    let p0 = bands.projector(j);
    let c0 = p0.derivative(g, 2).scale(C64::new(-eps, 0.0));
    let c1 = p0.derivative(g, 1).scale(C64::new(-2.0, 0.0));
    Dfo::normal_ordered(g, eps, vec![c0, c1])
}

/// Pieces of the expansion for band `j`.
#[derive(Clone, Debug)]
pub struct Superadiabatic {
    pub band: usize,
    pub eps: f64,
    pub order: u32,
    pub p0: Dfo,
    pub s1: Dfo,
    pub p1: Dfo,
    pub s2: Option<Dfo>,
    pub p2: Option<Dfo>,
    /// `P^(order)`
    pub almost: Dfo,
}

impl Superadiabatic {
    /// `P^(1) = P_0 + eps P_1`
    pub fn first(&self) -> Dfo {
        self.p0.add(&self.p1.scale_re(self.eps))
    }

    /// `eps^2 (S_1 S_1^* + S_1^* S_1)`, the exact defect of `P^(1)`.
    pub fn first_order_defect(&self) -> Dfo {
        let s1a = self.s1.adjoint();
        self.s1.compose(&s1a).add(&s1a.compose(&self.s1)).scale_re(self.eps * self.eps)
    }
}

pub fn check_smoothness(model: &FiberModel) -> Result<()> {
    let tail = model.fourier_tail();
    if tail > ROUGHNESS_TOL {
        return Err(Error::RoughFiber { tail });
    }
    Ok(())
}

/// Build `P^(1)` (order 1) or `P^(2)` (order 2) for band `j`.
pub fn superadiabatic(model: &FiberModel, bands: &BandData, j: usize, eps: f64, order: u32) -> Result<Superadiabatic> {
    if !(1..=2).contains(&order) {
        return Err(Error::Validation(format!("superadiabatic order {order} not in 1..=2")));
    }
    check_smoothness(model)?;
    let g = bands.grid();
    let h = Dfo::hamiltonian(g, eps, model.h_el());
    let p0 = Dfo::field(g, eps, bands.projector(j));
    let r = Dfo::field(g, eps, bands.reduced_resolvent(j));
    let bp0 = h.commutator(&p0).scale_re(1.0 / eps);
    let s1 = p0.compose(&bp0).compose(&r);
    let s1a = s1.adjoint();
    let p1 = s1.add(&s1a);
    let first = p0.add(&p1.scale_re(eps));
    if order == 1 {
        return Ok(Superadiabatic { band: j, eps, order, p0, s1, p1, s2: None, p2: None, almost: first });
    }
    let x = s1a.compose(&s1).sub(&s1.compose(&s1a));
    let tilde = first.add(&x.scale_re(eps * eps));
    let bt = h.commutator(&tilde).scale_re(1.0 / (eps * eps));
    let s2 = p0.compose(&bt).compose(&r);
    let p2 = s2.add(&s2.adjoint()).add(&x);
    let almost = first.add(&p2.scale_re(eps * eps));
    Ok(Superadiabatic { band: j, eps, order, p0, s1, p1, s2: Some(s2), p2: Some(p2), almost })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PurifyMethod {
    Auto,
    Eigen,
    NewtonSchulz,
}

/// Orthogonal projection obtained from an almost projection.
#[derive(Clone, Debug)]
pub struct Purified {
    pub matrix: DenseMatrix,
    pub rank: usize,
    pub method: PurifyMethod,
    pub iterations: usize,
    /// `|Q~^2 - Q~|` in operator norm (eigen path only)
    pub defect_norm: Option<f64>,
    /// `|Q - Q~|` in operator norm (eigen path only)
    pub distance_norm: Option<f64>,
}

impl Purified {
    pub fn apply(&self, psi: &State) -> State {
        if psi.sectors() == 1 {
            return apply_dense(&self.matrix, psi);
        }
        let mut out = psi.zeros_like();
        for s in 0..psi.sectors() {
            out.set_sector(s, &apply_dense(&self.matrix, &psi.sector_state(s)));
        }
        out
    }
}

/// Spectral projection of the Hermitian matrix `almost` onto eigenvalues above 1/2.
///
/// `batch_defect` is the measured defect of the almost projection; the construction requires
/// it to be below 1/4.
pub fn purify(almost: &DenseMatrix, batch_defect: f64, method: PurifyMethod, points: usize) -> Result<Purified> {
    if !(batch_defect < 0.25) {
        return Err(Error::DefectTooLarge { defect: batch_defect });
    }
    let q = hermitian_part(almost);
    let method = match method {
        PurifyMethod::Auto if points <= DENSE_PURIFY_MAX_POINTS => PurifyMethod::Eigen,
        PurifyMethod::Auto => PurifyMethod::NewtonSchulz,
        m => m,
    };
    match method {
        PurifyMethod::Eigen => {
            let size = q.nrows();
            let e = crate::dense::eigh(q);
            let mut matrix = DenseMatrix::zeros(size, size);
            let mut rank = 0;
            let mut defect: f64 = 0.0;
            let mut distance: f64 = 0.0;
            for (k, &lam) in e.eigenvalues.iter().enumerate() {
                defect = defect.max((lam * lam - lam).abs());
                if lam > 0.5 {
                    let v = e.eigenvectors.column(k);
                    matrix += &v * v.adjoint();
                    rank += 1;
                    distance = distance.max((1.0 - lam).abs());
                } else {
                    distance = distance.max(lam.abs());
                }
            }
            Ok(Purified { matrix, rank, method, iterations: 0, defect_norm: Some(defect), distance_norm: Some(distance) })
        }
        _ => {
            let mut m = q;
            for it in 1..=100 {
                let m2 = &m * &m;
                let m3 = &m2 * &m;
                let next = &m2 * C64::new(3.0, 0.0) - m3 * C64::new(2.0, 0.0);
                let change = (&next - &m).iter().map(|v| v.norm()).fold(0.0, f64::max);
                m = hermitian_part(&next);
                if change < 1e-14 {
                    let rank = m.trace().re.round() as usize;
                    log::info!("Newton-Schulz purification converged after {it} iterations");
                    return Ok(Purified { matrix: m, rank, method: PurifyMethod::NewtonSchulz, iterations: it, defect_norm: None, distance_norm: None });
                }
            }
            Err(Error::Convergence("Newton-Schulz purification did not converge".into()))
        }
    }
}

/// Superadiabatic projection together with its purified version.
#[derive(Clone, Debug)]
pub struct SuperProjection {
    pub parts: Superadiabatic,
    pub batch_defect: f64,
    pub purified: Arc<Purified>,
}

impl SuperProjection {
    pub fn apply(&self, psi: &State) -> State {
        self.purified.apply(psi)
    }
}

/// Sup of `|(A^2 - A) psi|` over a batch.
pub fn batch_defect(op: &Dfo, batch: &[State]) -> Result<f64> {
    batch_sup(batch, |psi| {
        let a = op.apply(psi);
        Ok(op.apply(&a).sub(&a).norm() / psi.norm())
    })
}

pub fn build_projection(
    model: &FiberModel,
    bands: &BandData,
    j: usize,
    eps: f64,
    order: u32,
    batch: &BatchOptions,
    seed: u64,
) -> Result<SuperProjection> {
    let parts = superadiabatic(model, bands, j, eps, order)?;
    let states = low_energy_batch(bands, eps, Electronic::Mixed, batch, seed, "purify");
    let defect = batch_defect(&parts.almost, &states)?;
    let purified = purify(&parts.almost.to_dense(), defect, PurifyMethod::Auto, bands.grid().n())?;
    Ok(SuperProjection { parts, batch_defect: defect, purified: Arc::new(purified) })
}

#[derive(Clone, Debug)]
pub struct SuperScanSetup {
    pub band: usize,
    pub partner: usize,
    pub order: u32,
    pub purified: bool,
    pub batch: BatchOptions,
    pub seed: u64,
}

impl Default for SuperScanSetup {
    fn default() -> Self {
        SuperScanSetup { band: 0, partner: 1, order: 2, purified: true, batch: BatchOptions::default(), seed: 0 }
    }
}

fn finish(ladder: &[f64], values: Vec<f64>) -> Result<ScanResult> {
    let fit = fit_scaling(ladder, &values)?;
    Ok(ScanResult { eps: ladder.to_vec(), values, fit })
}

/// Batch sup of the idempotency defect of the unpurified `P^(order)`.
pub fn defect_scan(model: &FiberModel, bands: &BandData, ladder: &[f64], setup: &SuperScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let parts = superadiabatic(model, bands, setup.band, eps, setup.order)?;
        let states = low_energy_batch(bands, eps, Electronic::Mixed, &setup.batch, setup.seed, "defect");
        values.push(batch_defect(&parts.almost, &states)?);
    }
    finish(ladder, values)
}

/// Batch sup of `|(P^(order) - P_0) psi|`.
pub fn distance_scan(model: &FiberModel, bands: &BandData, ladder: &[f64], setup: &SuperScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let parts = superadiabatic(model, bands, setup.band, eps, setup.order)?;
        let states = low_energy_batch(bands, eps, Electronic::Mixed, &setup.batch, setup.seed, "distance");
        let diff = parts.almost.sub(&parts.p0);
        values.push(batch_sup(&states, |psi| Ok(diff.apply(psi).norm()))?);
    }
    finish(ladder, values)
}

fn projection_action(
    model: &FiberModel,
    bands: &BandData,
    band: usize,
    eps: f64,
    setup: &SuperScanSetup,
) -> Result<Box<dyn Fn(&State) -> State>> {
    if setup.purified {
        let p = build_projection(model, bands, band, eps, setup.order, &setup.batch, setup.seed)?;
        Ok(Box::new(move |s: &State| p.apply(s)))
    } else {
        let parts = superadiabatic(model, bands, band, eps, setup.order)?;
        Ok(Box::new(move |s: &State| parts.almost.apply(s)))
    }
}

/// Batch sup of `|[H_mol, P] psi|` over low energy packets.
pub fn commutator_scaling_scan(model: Arc<FiberModel>, bands: &BandData, ladder: &[f64], setup: &SuperScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let p = projection_action(&model, bands, setup.band, eps, setup)?;
        let h = MolecularHamiltonian::new(model.clone(), eps);
        let states = low_energy_batch(bands, eps, Electronic::Mixed, &setup.batch, setup.seed, "commutator");
        values.push(batch_sup(&states, |psi| Ok(h.apply(&p(psi)).sub(&p(&h.apply(psi))).norm()))?);
    }
    finish(ladder, values)
}

/// Batch sup of `|P_partner P_band psi|` for the superadiabatic projections of two bands.
pub fn band_orthogonality_check(model: &FiberModel, bands: &BandData, ladder: &[f64], setup: &SuperScanSetup) -> Result<ScanResult> {
    let mut values = Vec::new();
    for &eps in ladder {
        let pj = projection_action(model, bands, setup.band, eps, setup)?;
        let pi = projection_action(model, bands, setup.partner, eps, setup)?;
        let states = low_energy_batch(bands, eps, Electronic::Mixed, &setup.batch, setup.seed, "orthogonality");
        values.push(batch_sup(&states, |psi| Ok(pi(&pj(psi)).norm()))?);
    }
    finish(ladder, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{diagonalize_bands, BandOptions};
    use crate::grid::Grid;
    use crate::model::RotationParams;

    fn setup(n: usize) -> (FiberModel, BandData) {
        let g = Grid::new(n, 2.0 * std::f64::consts::PI).unwrap();
        let m = FiberModel::rotation(&g, &RotationParams { gap_modulation: 0.2, ..Default::default() }).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        (m, b)
    }

    #[test]
    fn bracket_matches_commutator() {
        let (m, b) = setup(128);
        let eps = 0.05;
        let explicit = bracket_p0(&b, 0, eps);
        let h = MolecularHamiltonian::new(Arc::new(m.clone()), eps);
        let p0 = b.projector(0);
        let states = low_energy_batch(&b, eps, Electronic::Mixed, &BatchOptions { count: 4, ..Default::default() }, 3, "t");
        for psi in &states {
            let direct = h.apply(&p0.apply(psi)).sub(&p0.apply(&h.apply(psi)));
            let lhs = explicit.apply(psi);
            let res = lhs.scale_ret(eps).sub(&direct).norm() / direct.norm();
            assert!(res < 1e-8, "{res}");
        }
    }

    trait ScaleRet {
        fn scale_ret(self, a: f64) -> Self;
    }
    impl ScaleRet for State {
        fn scale_ret(mut self, a: f64) -> Self {
            self.scale(C64::new(a, 0.0));
            self
        }
    }

    #[test]
    fn first_order_structure() {
        let (m, b) = setup(64);
        let eps = 0.1;
        let sa = superadiabatic(&m, &b, 0, eps, 1).unwrap();
        let states = low_energy_batch(&b, eps, Electronic::Mixed, &BatchOptions { count: 3, ..Default::default() }, 1, "t");
        let p0 = b.projector(0);
        for psi in &states {
            // S_1 P_0 = 0 and P_1 self-adjoint
            assert!(sa.s1.apply(&p0.apply(psi)).norm() < 1e-10);
            let other = states[0].clone();
            let a = other.inner(&sa.p1.apply(psi));
            let c = sa.p1.apply(&other).inner(psi);
            assert!((a - c).norm() < 1e-10);
            // defect of P^(1) equals eps^2 (S S^* + S^* S)
            let p = sa.first();
            let pp = p.apply(psi);
            let defect = p.apply(&pp).sub(&pp);
            assert!(defect.sub(&sa.first_order_defect().apply(psi)).norm() < 1e-10);
        }
    }

    #[test]
    fn constant_fiber_is_exactly_invariant() {
        let g = Grid::new(64, 2.0 * std::f64::consts::PI).unwrap();
        let m = FiberModel::two_level_constant(&g, 1.0, 1.0).unwrap();
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        let setup = SuperScanSetup { batch: BatchOptions { count: 4, ..Default::default() }, ..Default::default() };
        let r = commutator_scaling_scan(Arc::new(m), &b, &[0.25, 0.125, 0.0625], &setup);
        // all commutators vanish, so every value is at the floor
        match r {
            Err(Error::NonPositiveValue { .. }) | Err(Error::Validation(_)) => {}
            Ok(r) => assert!(r.values.iter().all(|v| *v < 1e-10), "{:?}", r.values),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn purify_bound_on_perturbed_projection() {
        let (_, b) = setup(8);
        let p = b.projector(0);
        let eps = 1.0;
        let pd = Dfo::field(b.grid(), eps, p).to_dense();
        let size = pd.nrows();
        let mut pert = DenseMatrix::zeros(size, size);
        for r in 0..size {
            for c in 0..size {
                pert[(r, c)] = C64::new(((r * 7 + c * 3) % 5) as f64 - 2.0, ((r + 2 * c) % 3) as f64 - 1.0);
            }
        }
        let pert = hermitian_part(&pert);
        let scale = 0.01 / crate::dense::operator_norm(&pert);
        let q = &pd + pert * C64::new(scale, 0.0);
        let out = purify(&q, 0.05, PurifyMethod::Eigen, 8).unwrap();
        let ns = purify(&q, 0.05, PurifyMethod::NewtonSchulz, 8).unwrap();
        assert_eq!(out.rank, 8);
        let sq = &out.matrix * &out.matrix;
        assert!((&sq - &out.matrix).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10);
        assert!((&out.matrix - &ns.matrix).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10);
        let delta = out.defect_norm.unwrap();
        let dist = out.distance_norm.unwrap();
        // sharp form of the bound: |Q - Q~| <= (1 - sqrt(1 - 4 delta)) / 2
        assert!(dist <= 0.5 * (1.0 - (1.0 - 4.0 * delta).sqrt()) + 1e-14);
    }
}

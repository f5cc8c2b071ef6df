//! Decay probabilities of an excited band: the static golden rule, the closed-form rate
//! integral along the band dynamics, and a brute force oracle on the truncated dressed space.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bands::BandData;
use crate::batch::{wavepacket, BatchOptions};
use crate::dressed::{dyson_transition, Coupling, DressedHamiltonian, DressingParams, DysonOptions};
use crate::error::{Error, Result};
use crate::krylov::KrylovOptions;
use crate::model::FiberModel;
use crate::propagators::{build_bo_effective, project_coefficient, DiagonalHamiltonian};
use crate::state::State;
use crate::superadiabatic::{build_projection, Purified};
use crate::C64;

/// Probabilities above this are outside the linear regime of the golden rule.
pub const LINEAR_REGIME_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RateFormula,
    Dyson,
    Oracle,
    FgrStatic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::RateFormula => "rate-formula",
            Method::Dyson => "dyson",
            Method::Oracle => "oracle",
            Method::FgrStatic => "fgr-static",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayCurve {
    pub method: Method,
    pub times: Vec<f64>,
    pub probability: Vec<f64>,
}

impl DecayCurve {
    pub fn last(&self) -> f64 {
        self.probability.last().copied().unwrap_or(0.0)
    }
}

/// `(4/3) alpha^3 dE^3 |D|^2 t`; logs a warning outside the linear regime.
pub fn fgr_static(delta_e: f64, dipole: f64, alpha: f64, t: f64) -> Result<f64> {
    if !(delta_e > 0.0) {
        return Err(Error::WrongSign { x: f64::NAN, gap: delta_e });
    }
    let p = 4.0 / 3.0 * alpha.powi(3) * delta_e.powi(3) * dipole * dipole * t;
    if p > LINEAR_REGIME_LIMIT {
        log::warn!("golden rule probability {p} is out of the linear regime");
    }
    Ok(p)
}

/// Local decay rate `(4/3) |D_ij(x)|^2 Delta(x)^3` with `Delta = E_j - E_i`.
pub fn rate_density(model: &FiberModel, bands: &BandData, i: usize, j: usize) -> Result<Vec<f64>> {
    let dip = bands.dipole(i, j, model.mu());
    let grid = bands.grid();
    bands
        .energies(j)
        .iter()
        .zip(bands.energies(i))
        .zip(dip)
        .enumerate()
        .map(|(k, ((ej, ei), d))| {
            let gap = ej - ei;
            if gap <= 0.0 {
                return Err(Error::WrongSign { x: grid.x(k), gap });
            }
            Ok(4.0 / 3.0 * d.norm_sqr() * gap.powi(3))
        })
        .collect()
}

fn weighted_norm_sqr(psi: &State, w: &[f64]) -> f64 {
    let h = psi.grid().spacing();
    let mut acc = 0.0;
    for s in 0..psi.sectors() {
        for (i, wi) in w.iter().enumerate() {
            acc += wi * psi.fiber(s, i).iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
    }
    acc * h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandPropagation {
    /// exact band diagonal `H_j`
    Diagonal,
    /// effective Hamiltonian with the Berry connection and the product reconstruction
    BornOppenheimer,
}

#[derive(Clone, Debug)]
pub struct DecayOptions {
    pub samples: usize,
    pub propagation: BandPropagation,
    pub krylov: KrylovOptions,
    /// Simpson subintervals per sample interval at the first level (even).
    pub panels: usize,
    pub max_doublings: usize,
    /// stop doubling below this relative change
    pub tol: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        DecayOptions { samples: 32, propagation: BandPropagation::Diagonal, krylov: KrylovOptions::default(), panels: 2, max_doublings: 4, tol: 1e-6 }
    }
}

fn rate_samples(
    model: &Arc<FiberModel>,
    bands: &BandData,
    j: usize,
    psi: &State,
    w: &[f64],
    t: f64,
    eps: f64,
    points: usize,
    opts: &DecayOptions,
) -> Result<Vec<f64>> {
    let dt = t / (points - 1) as f64;
    let mut out = Vec::with_capacity(points);
    match opts.propagation {
        BandPropagation::Diagonal => {
            let hj = DiagonalHamiltonian::new(model.clone(), bands, j, eps);
            let mut cur = psi.clone();
            for k in 0..points {
                if k > 0 {
                    cur = hj.propagate(&cur, dt, &opts.krylov)?;
                }
                out.push(weighted_norm_sqr(&cur, w));
            }
        }
        BandPropagation::BornOppenheimer => {
            let bo = build_bo_effective(bands, j, eps, true);
            let mut c = project_coefficient(bands, j, psi);
            for k in 0..points {
                if k > 0 {
                    c = bo.propagate(&c, dt, &opts.krylov)?;
                }
                // |c(x) phi_j(x)|^2 = |c(x)|^2
                let h = psi.grid().spacing();
                out.push(c.data().iter().zip(w).map(|(v, wi)| v.norm_sqr() * wi).sum::<f64>() * h);
            }
        }
    }
    Ok(out)
}

/// Cumulative composite Simpson integral at the sample points of `values`, which are spaced by
/// `dt` with `per` (even) subintervals per sample interval.
fn cumulative_simpson(values: &[f64], dt: f64, per: usize) -> Vec<f64> {
    let samples = (values.len() - 1) / per;
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for s in 0..samples {
        for p in (0..per).step_by(2) {
            let a = s * per + p;
            acc += dt / 3.0 * (values[a] + 4.0 * values[a + 1] + values[a + 2]);
        }
        out.push(acc);
    }
    out
}

/// `prefactor * int_0^t (4/3) | |D_ij| Delta^{3/2} exp(-i s/eps H_j) P_j psi0 |^2 ds` on
/// `samples + 1` uniform times, by composite Simpson with step doubling.
pub fn decay_probability(
    model: Arc<FiberModel>,
    bands: &BandData,
    i: usize,
    j: usize,
    psi0: &State,
    t: f64,
    params: &DressingParams,
    opts: &DecayOptions,
) -> Result<DecayCurve> {
    let samples = opts.samples.max(1);
    let times: Vec<f64> = (0..=samples).map(|k| t * k as f64 / samples as f64).collect();
    if t == 0.0 {
        return Ok(DecayCurve { method: Method::RateFormula, times, probability: vec![0.0; samples + 1] });
    }
    let w = rate_density(&model, bands, i, j)?;
    let psi = bands.projector(j).apply(psi0);
    let pref = params.probability_prefactor();
    let mut per = opts.panels.max(2) & !1;
    let mut prev: Option<Vec<f64>> = None;
    let mut change = f64::INFINITY;
    for _ in 0..=opts.max_doublings {
        let points = samples * per + 1;
        let vals = rate_samples(&model, bands, j, &psi, &w, t, params.eps, points, opts)?;
        let cum: Vec<f64> = cumulative_simpson(&vals, t / (points - 1) as f64, per).into_iter().map(|v| v * pref).collect();
        if let Some(p) = &prev {
            let last = *cum.last().unwrap();
            change = if last > 0.0 { (last - p.last().unwrap()).abs() / last } else { 0.0 };
            if change < opts.tol {
                return Ok(DecayCurve { method: Method::RateFormula, times, probability: cum });
            }
        }
        prev = Some(cum);
        per *= 2;
    }
    if change.is_finite() && change > 0.01 {
        return Err(Error::QuadratureNotConverged { rel_change: change });
    }
    log::info!("rate quadrature stopped at relative change {change:e}");
    Ok(DecayCurve { method: Method::RateFormula, times, probability: prev.unwrap() })
}

/// Which projection on band `i` measures the oracle's transition probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleProjection {
    Bare,
    Purified,
}

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub samples: usize,
    pub projection: OracleProjection,
    pub krylov: KrylovOptions,
    pub max_state_dim: usize,
    /// bound on `(t / eps) * spectral width / 10`, a proxy for Krylov restarts
    pub max_steps: usize,
    pub batch: BatchOptions,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            samples: 32,
            projection: OracleProjection::Bare,
            krylov: KrylovOptions { tol: 1e-8, max_dim: 30 },
            max_state_dim: 1 << 22,
            max_steps: 1 << 20,
            batch: BatchOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub curve: DecayCurve,
    /// `max_t | |Psi(t)| - |Psi(0)| |`
    pub norm_drift: f64,
    /// largest adiabatic estimate of the truncated two-photon weight
    pub dropped_weight: f64,
}

/// Brute force `|(P_i (x) 1) exp(-i t/eps H) (psi0 (x) vacuum)|^2` on the one-photon truncated space.
#[allow(clippy::too_many_arguments)]
pub fn oracle_transition(
    model: Arc<FiberModel>,
    bands: &BandData,
    coupling: Arc<Coupling>,
    i: usize,
    psi0: &State,
    t: f64,
    params: &DressingParams,
    opts: &OracleOptions,
) -> Result<OracleResult> {
    let grid = bands.grid();
    let sectors = 1 + coupling.modes().len();
    let dim = grid.n() * bands.dim() * sectors;
    if dim > opts.max_state_dim {
        return Err(Error::BudgetExceeded(format!("dressed state dimension {dim} exceeds {}", opts.max_state_dim)));
    }
    let h_el_max = model.h_el().mats().iter().map(|m| m.iter().map(|v| v.norm()).sum::<f64>()).fold(0.0, f64::max);
    let width = (params.eps * grid.k_max()).powi(2) + 2.0 * h_el_max + coupling.modes().cutoff();
    let steps = (t / params.eps * width / 10.0).ceil() as usize;
    if steps > opts.max_steps {
        return Err(Error::BudgetExceeded(format!("about {steps} Krylov steps exceed {}", opts.max_steps)));
    }
    if params.beta >= 1.0 && opts.projection == OracleProjection::Bare {
        log::warn!("bare band projection with beta = {} >= 1: superadiabatic corrections are of the same order", params.beta);
    }
    let proj: Box<dyn Fn(&State) -> State> = match opts.projection {
        OracleProjection::Bare => {
            let p = bands.projector(i);
            Box::new(move |s: &State| p.apply(s))
        }
        OracleProjection::Purified => {
            let p = build_projection(&model, bands, i, params.eps, 2, &opts.batch, opts.seed)?;
            Box::new(move |s: &State| p.apply(s))
        }
    };
    let gap_min = (0..bands.dim())
        .flat_map(|a| (0..bands.dim()).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| bands.energies(a).iter().zip(bands.energies(b)).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min))
        .fold(f64::INFINITY, f64::min);
    let h = DressedHamiltonian::new(model, coupling, params.eps, params.strength);
    let mut psi = h.vacuum(psi0);
    let norm0 = psi.norm();
    let samples = opts.samples.max(1);
    let dt = t / samples as f64;
    let mut times = Vec::with_capacity(samples + 1);
    let mut probability = Vec::with_capacity(samples + 1);
    let mut drift: f64 = 0.0;
    let mut dropped: f64 = 0.0;
    for k in 0..=samples {
        if k > 0 {
            psi = h.propagate(&psi, dt, &opts.krylov)?;
        }
        times.push(dt * k as f64);
        probability.push(proj(&psi).norm_sqr());
        drift = drift.max((psi.norm() - norm0).abs());
        dropped = dropped.max(h.dropped_weight(&psi) / (gap_min * gap_min));
    }
    log::info!("oracle: norm drift {drift:e}, dropped two-photon weight estimate {dropped:e}");
    Ok(OracleResult { curve: DecayCurve { method: Method::Oracle, times, probability }, norm_drift: drift, dropped_weight: dropped })
}

/// Normalised `P (chi phi_j)` for a Gaussian `chi`; `P` is the purified superadiabatic projection
/// when given, otherwise the band projection.
pub fn band_packet(bands: &BandData, j: usize, x0: f64, p0: f64, sigma: f64, eps: f64, projection: Option<&Purified>) -> State {
    let psi = wavepacket(bands, &[(j, C64::new(1.0, 0.0))], x0, p0, sigma, eps);
    match projection {
        Some(p) => p.apply(&psi).normalized(),
        None => psi,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub eps: f64,
    pub rate_formula: f64,
    pub dyson: Option<f64>,
    pub oracle: Option<f64>,
    pub oracle_deviation: Option<f64>,
    pub dyson_deviation: Option<f64>,
    pub norm_drift: Option<f64>,
    pub dropped_weight: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub t: f64,
    pub beta: f64,
    pub rows: Vec<ComparisonRow>,
    pub oracle_decreasing: Option<bool>,
    pub dyson_decreasing: Option<bool>,
}

/// True if the sequence decreases with at most one inversion.
pub fn decreasing_up_to_one_inversion(values: &[f64]) -> bool {
    values.windows(2).filter(|w| w[1] > w[0]).count() <= 1
}

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub dyson: Option<DysonOptions>,
    pub oracle: Option<OracleOptions>,
    pub decay: DecayOptions,
    pub delta_override: Option<f64>,
}

/// Rate formula against the Dyson integral and the oracle along an `eps` ladder.
/// `setup(eps)` returns the coupling and the initial band `j` state for that `eps`.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    model: Arc<FiberModel>,
    bands: &BandData,
    i: usize,
    j: usize,
    t: f64,
    ladder: &[f64],
    beta: f64,
    opts: &CompareOptions,
    mut setup: impl FnMut(f64) -> Result<(Arc<Coupling>, State)>,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    for &eps in ladder {
        let (coupling, psi0) = setup(eps)?;
        let mut params = DressingParams::new(eps, beta);
        if let Some(d) = opts.delta_override {
            params = params.with_delta(d);
        }
        let th = decay_probability(model.clone(), bands, i, j, &psi0, t, &params, &opts.decay)?.last();
        let dyson = match &opts.dyson {
            Some(o) => Some(dyson_transition(model.clone(), bands, &coupling, i, j, &psi0, t, &params, o)?.probability),
            None => None,
        };
        let oracle = match &opts.oracle {
            Some(o) => Some(oracle_transition(model.clone(), bands, coupling.clone(), i, &psi0, t, &params, o)?),
            None => None,
        };
        let dev = |v: f64| if th > 0.0 { (v - th).abs() / th } else { 0.0 };
        rows.push(ComparisonRow {
            eps,
            rate_formula: th,
            dyson,
            oracle: oracle.as_ref().map(|o| o.curve.last()),
            oracle_deviation: oracle.as_ref().map(|o| dev(o.curve.last())),
            dyson_deviation: dyson.map(dev),
            norm_drift: oracle.as_ref().map(|o| o.norm_drift),
            dropped_weight: oracle.as_ref().map(|o| o.dropped_weight),
        });
    }
    let seq = |f: &dyn Fn(&ComparisonRow) -> Option<f64>| -> Option<bool> {
        let v: Option<Vec<f64>> = rows.iter().map(f).collect();
        v.map(|v| decreasing_up_to_one_inversion(&v))
    };
    let oracle_decreasing = seq(&|r| r.oracle_deviation);
    let dyson_decreasing = seq(&|r| r.dyson_deviation);
    Ok(Comparison { t, beta, rows, oracle_decreasing, dyson_decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{diagonalize_bands, BandOptions};
    use crate::dressed::{PhotonModes, QuadratureScheme};
    use crate::grid::Grid;
    use crate::model::RotationParams;
    use std::f64::consts::PI;

    #[test]
    fn static_golden_rule() {
        assert_eq!(fgr_static(1.0, 0.0, 0.1, 1.0).unwrap(), 0.0);
        assert_eq!(fgr_static(1.0, 1.0, 0.1, 0.0).unwrap(), 0.0);
        assert!((fgr_static(1.0, 1.0, 0.1, 1.0).unwrap() - 4.0 / 3.0 * 1e-3).abs() < 1e-15);
        assert!(fgr_static(-1.0, 1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn constant_rate_is_linear_and_scales_with_prefactor() {
        let g = Grid::new(32, 2.0 * PI).unwrap();
        let m = Arc::new(FiberModel::two_level_constant(&g, 1.5, 0.7).unwrap());
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        for eps in [0.25, 0.125] {
            let params = DressingParams::new(eps, 1.1);
            let psi = band_packet(&b, 1, 1.0, 0.5, 0.5, eps, None);
            let c = decay_probability(m.clone(), &b, 0, 1, &psi, 0.5, &params, &DecayOptions::default()).unwrap();
            let rate = 4.0 / 3.0 * 0.49 * 1.5f64.powi(3) * eps.powf(3.0 * 1.1 - 1.0);
            for (t, p) in c.times.iter().zip(&c.probability) {
                assert!((p - rate * t).abs() < 1e-10 * rate, "{p} {}", rate * t);
            }
        }
        let none = Arc::new(FiberModel::two_level_constant(&g, 1.5, 0.0).unwrap());
        let psi = band_packet(&b, 1, 1.0, 0.5, 0.5, 0.25, None);
        let c = decay_probability(none, &b, 0, 1, &psi, 0.5, &DressingParams::new(0.25, 1.0), &DecayOptions::default()).unwrap();
        assert!(c.probability.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn decay_curve_is_additive() {
        let g = Grid::new(64, 2.0 * PI).unwrap();
        let m = Arc::new(FiberModel::rotation(&g, &RotationParams { gap_modulation: 0.2, ..Default::default() }).unwrap());
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        let eps = 0.125;
        let params = DressingParams::new(eps, 1.0);
        let psi = band_packet(&b, 1, 1.0, 0.5, 0.4, eps, None);
        let opts = DecayOptions { samples: 4, max_doublings: 0, krylov: KrylovOptions { tol: 1e-13, max_dim: 30 }, ..Default::default() };
        let whole = decay_probability(m.clone(), &b, 0, 1, &psi, 1.0, &params, &opts).unwrap();
        let first = decay_probability(m.clone(), &b, 0, 1, &psi, 0.5, &params, &DecayOptions { samples: 2, ..opts.clone() }).unwrap();
        let mid = DiagonalHamiltonian::new(m.clone(), &b, 1, eps).propagate(&psi, 0.5, &opts.krylov).unwrap();
        let second = decay_probability(m, &b, 0, 1, &mid, 0.5, &params, &DecayOptions { samples: 2, ..opts }).unwrap();
        assert!((whole.last() - first.last() - second.last()).abs() < 1e-10 * whole.last());
    }

    #[test]
    fn zero_coupling_oracle_is_zero() {
        let g = Grid::new(16, 2.0 * PI).unwrap();
        let m = Arc::new(FiberModel::two_level_constant(&g, 1.0, 0.0).unwrap());
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        let modes = Arc::new(PhotonModes::new(4.0, 16, QuadratureScheme::UniformMidpoint).unwrap());
        let c = Arc::new(Coupling::new(&m, modes));
        let psi = band_packet(&b, 1, 1.0, 0.0, 0.5, 0.25, None);
        let params = DressingParams::new(0.25, 1.0);
        let r = oracle_transition(m, &b, c, 0, &psi, 1.0, &params, &OracleOptions { samples: 4, ..Default::default() }).unwrap();
        assert!(r.curve.probability.iter().all(|p| *p < 1e-12));
        assert!(r.norm_drift < 1e-8);
    }

    fn interpolant(grid: &Grid, f: &[f64]) -> impl Fn(f64) -> f64 {
        let mut c: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
        grid.fft(&mut c);
        let k = grid.wavenumbers().to_vec();
        let n = grid.n() as f64;
        move |x| c.iter().zip(&k).map(|(ck, kk)| (ck * C64::from_polar(1.0, kk * x)).re).sum::<f64>() / n
    }

    #[test]
    fn traveling_packet_follows_classical_rate() {
        let g = Grid::new(256, 2.0 * PI).unwrap();
        let m = Arc::new(FiberModel::rotation(&g, &RotationParams { gap_modulation: 0.2, ..Default::default() }).unwrap());
        let b = diagonalize_bands(&m, &BandOptions::default()).unwrap();
        let eps = 1.0 / 64.0;
        let (x0, p0, t) = (1.0, 0.8, 1.5);
        let params = DressingParams::new(eps, 1.0);
        let psi = band_packet(&b, 1, x0, p0, 0.15, eps, None);
        let q = decay_probability(m.clone(), &b, 0, 1, &psi, t, &params, &DecayOptions { samples: 8, ..Default::default() }).unwrap();

        let rate = interpolant(&g, &rate_density(&m, &b, 0, 1).unwrap());
        let force = interpolant(&g, &g.derivative_real(b.energies(1), 1));
        let steps = 4000;
        let h = t / steps as f64;
        let (mut x, mut p, mut acc) = (x0, p0, 0.0);
        let field = |x: f64, p: f64| (2.0 * p, -force(x));
        for _ in 0..steps {
            let r0 = rate(x);
            let (k1x, k1p) = field(x, p);
            let (k2x, k2p) = field(x + 0.5 * h * k1x, p + 0.5 * h * k1p);
            let (k3x, k3p) = field(x + 0.5 * h * k2x, p + 0.5 * h * k2p);
            let (k4x, k4p) = field(x + h * k3x, p + h * k3p);
            let (xm, xn) = (x + 0.5 * h * k1x, x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x));
            acc += h / 6.0 * (r0 + 4.0 * rate(xm) + rate(xn));
            x = xn;
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        }
        let classical = params.probability_prefactor() * acc;
        assert!((x - x0).abs() > 1.0, "packet did not travel");
        let dev = (q.last() - classical).abs() / classical;
        assert!(dev < 0.05, "quantum {} classical {classical} deviation {dev}", q.last());
    }

    #[test]
    fn inversion_rule() {
        assert!(decreasing_up_to_one_inversion(&[3.0, 2.0, 1.0]));
        assert!(decreasing_up_to_one_inversion(&[3.0, 4.0, 1.0]));
        assert!(!decreasing_up_to_one_inversion(&[1.0, 2.0, 3.0]));
    }
}

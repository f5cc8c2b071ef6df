//! Low energy Gaussian wavepackets used as test batches for operator norms.

use nalgebra::DMatrix;
use rand::Rng;

use crate::bands::BandData;
use crate::dense::{apply_dense, DenseMatrix};
use crate::error::Result;
use crate::grid::Grid;
use crate::rng::keyed_rng;
use crate::state::State;
use crate::C64;

/// Electronic content of batch states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Electronic {
    /// Only band `j`.
    Band(usize),
    /// Random complex superposition of all bands.
    Mixed,
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub count: usize,
    /// Semiclassical momenta `p0 = eps k0` are drawn from `[-max_momentum, max_momentum]`.
    pub max_momentum: f64,
    pub width: (f64, f64),
    /// Fourier modes with `|eps k|` above this are removed.
    pub momentum_cut: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { count: 16, max_momentum: 1.0, width: (0.3, 0.5), momentum_cut: 3.0 }
    }
}

/// Periodised Gaussian `exp(-(x - x0)^2 / (2 sigma^2) + i p0 (x - x0) / eps)`.
pub fn gaussian(grid: &Grid, x0: f64, p0: f64, sigma: f64, eps: f64) -> Vec<C64> {
    let l = grid.length();
    let images = (4.0 * sigma / l).ceil() as i64 + 1;
    (0..grid.n())
        .map(|i| {
            let x = grid.x(i);
            (-images..=images)
                .map(|m| {
                    let y = x - x0 + m as f64 * l;
                    C64::from_polar((-y * y / (2.0 * sigma * sigma)).exp(), p0 * y / eps)
                })
                .sum()
        })
        .collect()
}

/// Drop Fourier modes with `|eps k| > cut` in every sector and component.
pub fn truncate_momentum(psi: &mut State, eps: f64, cut: f64) {
    let mult: Vec<C64> =
        psi.grid().wavenumbers().iter().map(|k| if (eps * k).abs() > cut { C64::new(0.0, 0.0) } else { C64::new(1.0, 0.0) }).collect();
    psi.apply_multiplier(&mult);
}

/// Normalised packet `chi(x) sum_b c_b phi_b(x)` in the smooth periodic gauge.
pub fn wavepacket(bands: &BandData, coeffs: &[(usize, C64)], x0: f64, p0: f64, sigma: f64, eps: f64) -> State {
    let grid = bands.grid();
    let d = bands.dim();
    let chi = gaussian(grid, x0, p0, sigma, eps);
    let smooth: Vec<_> = coeffs.iter().map(|(b, c)| (bands.smooth_vectors(*b), *c)).collect();
    let mut psi = State::zeros(grid, d, 1);
    for i in 0..grid.n() {
        let f = psi.fiber_mut(0, i);
        for (vs, c) in &smooth {
            for a in 0..d {
                f[a] += chi[i] * c * vs[i][a];
            }
        }
    }
    psi.normalized()
}

/// Reproducible batch of low energy packets; the random parameters depend on `(seed, tag)` only,
/// so the same physical packets (rescaled in momentum) are used for every `eps`.
pub fn low_energy_batch(bands: &BandData, eps: f64, electronic: Electronic, opts: &BatchOptions, seed: u64, tag: &str) -> Vec<State> {
    let mut rng = keyed_rng(seed, tag);
    let l = bands.grid().length();
    (0..opts.count)
        .map(|_| {
            let x0 = rng.gen::<f64>() * l;
            let p0 = (2.0 * rng.gen::<f64>() - 1.0) * opts.max_momentum;
            let sigma = opts.width.0 + rng.gen::<f64>() * (opts.width.1 - opts.width.0);
            let coeffs: Vec<(usize, C64)> = match electronic {
                Electronic::Band(j) => vec![(j, C64::new(1.0, 0.0))],
                Electronic::Mixed => {
                    (0..bands.dim()).map(|b| (b, C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))).collect()
                }
            };
            let mut psi = wavepacket(bands, &coeffs, x0, p0, sigma, eps);
            truncate_momentum(&mut psi, eps, opts.momentum_cut);
            psi.normalized()
        })
        .collect()
}

/// `sup_psi f(psi)` over a batch.
pub fn batch_sup(batch: &[State], mut f: impl FnMut(&State) -> Result<f64>) -> Result<f64> {
    let mut best: f64 = 0.0;
    for psi in batch {
        best = best.max(f(psi)?);
    }
    Ok(best)
}

/// Norm of `a` restricted to the spectral subspace of the Hermitian `h` below `energy_cut`.
///
/// Dense cross-check for the batch estimates on small grids.
pub fn spectral_filter_norm(a: &DenseMatrix, h: &DenseMatrix, energy_cut: f64) -> f64 {
    let e = crate::dense::eigh(crate::dense::hermitian_part(h));
    let cols: Vec<usize> = (0..e.eigenvalues.len()).filter(|&k| e.eigenvalues[k] <= energy_cut).collect();
    if cols.is_empty() {
        return 0.0;
    }
    let size = h.nrows();
    let mut basis = DMatrix::<C64>::zeros(size, cols.len());
    for (c, &k) in cols.iter().enumerate() {
        basis.set_column(c, &e.eigenvectors.column(k));
    }
    crate::dense::operator_norm(&(a * basis))
}

/// Batch estimate of the norm of a dense operator; convenience for comparisons with
/// [`spectral_filter_norm`].
pub fn batch_norm_dense(a: &DenseMatrix, batch: &[State]) -> f64 {
    batch.iter().map(|psi| apply_dense(a, psi).norm() / psi.norm()).fold(0.0, f64::max)
}

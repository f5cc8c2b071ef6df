//! Differential fiber operators: finite sums of products of matrix fields `A(x)` and scaled
//! derivatives `(eps d)^a`.
//!
//! Products are kept as words (`A_1 (eps d)^{a_1} A_2 ...`) instead of being normal ordered,
//! so composition and adjoints are exact for the discrete spectral derivative. The adjoint of
//! `A (eps d)^a` is `(-eps d)^a A^*`, the integration by parts rule.

use std::sync::Arc;

use crate::dense::{to_dense, DenseMatrix};
use crate::fiber::FiberField;
use crate::grid::Grid;
use crate::state::State;
use crate::C64;

const ZERO_TOL: f64 = 1e-13;

#[derive(Clone, Debug)]
pub enum Factor {
    Field(Arc<FiberField>),
    /// `(eps d)^a`
    Deriv(u32),
}

#[derive(Clone, Debug)]
pub struct Term {
    pub coeff: C64,
    /// leftmost factor acts last
    pub factors: Vec<Factor>,
}

impl Term {
    fn order(&self) -> u32 {
        self.factors.iter().map(|f| if let Factor::Deriv(a) = f { *a } else { 0 }).sum()
    }
}

#[derive(Clone, Debug)]
pub struct DifferentialFiberOperator {
    grid: Grid,
    dim: usize,
    eps: f64,
    terms: Vec<Term>,
}

pub type Dfo = DifferentialFiberOperator;

impl DifferentialFiberOperator {
    pub fn zero(grid: &Grid, dim: usize, eps: f64) -> Self {
        Dfo { grid: grid.clone(), dim, eps, terms: Vec::new() }
    }

    pub fn identity(grid: &Grid, dim: usize, eps: f64) -> Self {
        Dfo { grid: grid.clone(), dim, eps, terms: vec![Term { coeff: C64::new(1.0, 0.0), factors: Vec::new() }] }
    }

    pub fn field(grid: &Grid, eps: f64, f: FiberField) -> Self {
        let dim = f.dim();
        Dfo { grid: grid.clone(), dim, eps, terms: vec![Term { coeff: C64::new(1.0, 0.0), factors: vec![Factor::Field(Arc::new(f))] }] }
    }

    /// `(eps d)^a`
    pub fn deriv(grid: &Grid, dim: usize, eps: f64, a: u32) -> Self {
        Dfo { grid: grid.clone(), dim, eps, terms: vec![Term { coeff: C64::new(1.0, 0.0), factors: vec![Factor::Deriv(a)] }] }
    }

    /// `sum_a A_a(x) (eps d)^a`
    pub fn normal_ordered(grid: &Grid, eps: f64, coeffs: Vec<FiberField>) -> Self {
        let dim = coeffs[0].dim();
        let terms = coeffs
            .into_iter()
            .enumerate()
            .map(|(a, f)| Term { coeff: C64::new(1.0, 0.0), factors: vec![Factor::Field(Arc::new(f)), Factor::Deriv(a as u32)] })
            .collect();
        Dfo { grid: grid.clone(), dim, eps, terms }.simplified()
    }

    /// `-(eps d)^2 + H_el(x)`
    pub fn hamiltonian(grid: &Grid, eps: f64, h_el: &FiberField) -> Self {
        Dfo::deriv(grid, h_el.dim(), eps, 2).scale(C64::new(-1.0, 0.0)).add(&Dfo::field(grid, eps, h_el.clone()))
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Highest total number of derivatives in a word.
    pub fn order(&self) -> u32 {
        self.terms.iter().map(Term::order).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Dfo) -> Dfo {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Dfo { grid: self.grid.clone(), dim: self.dim, eps: self.eps, terms }
    }

    pub fn sub(&self, other: &Dfo) -> Dfo {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, a: C64) -> Dfo {
        let terms = self.terms.iter().map(|t| Term { coeff: t.coeff * a, factors: t.factors.clone() }).collect();
        Dfo { grid: self.grid.clone(), dim: self.dim, eps: self.eps, terms }
    }

    pub fn scale_re(&self, a: f64) -> Dfo {
        self.scale(C64::new(a, 0.0))
    }

    /// `self o other`
    pub fn compose(&self, other: &Dfo) -> Dfo {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                let mut factors = a.factors.clone();
                factors.extend(b.factors.iter().cloned());
                terms.push(Term { coeff: a.coeff * b.coeff, factors });
            }
        }
        Dfo { grid: self.grid.clone(), dim: self.dim, eps: self.eps, terms }.simplified()
    }

    /// `self o other - other o self`
    pub fn commutator(&self, other: &Dfo) -> Dfo {
        self.compose(other).sub(&other.compose(self))
    }

    pub fn adjoint(&self) -> Dfo {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut sign = 1.0;
                let factors = t
                    .factors
                    .iter()
                    .rev()
                    .map(|f| match f {
                        Factor::Field(a) => Factor::Field(Arc::new(a.adjoint())),
                        Factor::Deriv(k) => {
                            if k % 2 == 1 {
                                sign = -sign;
                            }
                            Factor::Deriv(*k)
                        }
                    })
                    .collect();
                Term { coeff: t.coeff.conj() * sign, factors }
            })
            .collect();
        Dfo { grid: self.grid.clone(), dim: self.dim, eps: self.eps, terms }
    }

    /// Merge neighbouring factors of the same kind and drop words that vanish identically.
    pub fn simplified(self) -> Dfo {
        let mut terms = Vec::with_capacity(self.terms.len());
        'outer: for t in self.terms {
            if t.coeff == C64::new(0.0, 0.0) {
                continue;
            }
            let mut out: Vec<Factor> = Vec::with_capacity(t.factors.len());
            for f in t.factors {
                match (out.last_mut(), f) {
                    (_, Factor::Deriv(0)) => {}
                    (Some(Factor::Deriv(a)), Factor::Deriv(b)) => *a += b,
                    (Some(Factor::Field(a)), Factor::Field(b)) => {
                        let p = a.mul(&b);
                        if p.max_abs() <= ZERO_TOL * a.max_abs() * b.max_abs() {
                            continue 'outer;
                        }
                        *a = Arc::new(p);
                    }
                    (_, f) => out.push(f),
                }
            }
            if out.iter().any(|f| matches!(f, Factor::Field(a) if a.max_abs() == 0.0)) {
                continue;
            }
            terms.push(Term { coeff: t.coeff, factors: out });
        }
        Dfo { grid: self.grid, dim: self.dim, eps: self.eps, terms }
    }

    pub fn apply(&self, psi: &State) -> State {
        let mut out = psi.zeros_like();
        let max_order = self.order();
        let symbols: Vec<Vec<C64>> = (0..=max_order)
            .map(|a| self.grid.wavenumbers().iter().map(|k| C64::new(0.0, self.eps * k).powu(a)).collect())
            .collect();
        for t in &self.terms {
            let mut w = psi.clone();
            for f in t.factors.iter().rev() {
                match f {
                    Factor::Field(a) => w = a.apply(&w),
                    Factor::Deriv(k) => w.apply_multiplier(&symbols[*k as usize]),
                }
            }
            out.axpy(t.coeff, &w);
        }
        out
    }

    /// Dense matrix on one sector.
    pub fn to_dense(&self) -> DenseMatrix {
        to_dense(&|s: &State| self.apply(s), &self.grid, self.dim, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::Mat;

    fn smooth_state(g: &Grid, seed: f64) -> State {
        State::molecular_from_fn(g, 2, |x| {
            vec![C64::new((x + seed).sin(), (2.0 * x).cos() * 0.3), C64::new(0.5 * (x - seed).cos(), (3.0 * x + seed).sin() * 0.2)]
        })
    }

    fn field(g: &Grid) -> FiberField {
        FiberField::from_fn(g, 2, |x| {
            Mat::from_row_slice(2, 2, &[C64::new(x.cos(), 0.1), C64::new(0.3, x.sin()), C64::new(-0.2, 0.0), C64::new(1.0, (2.0 * x).sin())])
        })
    }

    #[test]
    fn adjoint_is_exact() {
        let g = Grid::new(32, 2.0 * std::f64::consts::PI).unwrap();
        let eps = 0.1;
        let a = Dfo::field(&g, eps, field(&g));
        let op = a.compose(&Dfo::deriv(&g, 2, eps, 1)).add(&Dfo::deriv(&g, 2, eps, 2).compose(&a).compose(&a));
        let adj = op.adjoint();
        let u = smooth_state(&g, 0.3);
        let v = smooth_state(&g, 1.1);
        let lhs = u.inner(&op.apply(&v));
        let rhs = adj.apply(&u).inner(&v);
        assert!((lhs - rhs).norm() < 1e-12 * lhs.norm().max(1.0));
        assert_eq!(op.order(), 2);
    }

    #[test]
    fn leibniz_matches_composition_on_smooth_states() {
        let g = Grid::new(64, 2.0 * std::f64::consts::PI).unwrap();
        let eps = 0.05;
        let a = field(&g);
        // (eps d) o A = eps A' + A (eps d)
        let lhs = Dfo::deriv(&g, 2, eps, 1).compose(&Dfo::field(&g, eps, a.clone()));
        let rhs = Dfo::normal_ordered(&g, eps, vec![a.derivative(&g, 1).scale(C64::new(eps, 0.0)), a]);
        let u = smooth_state(&g, 0.4);
        assert!(lhs.apply(&u).sub(&rhs.apply(&u)).norm() < 1e-11);
    }
}

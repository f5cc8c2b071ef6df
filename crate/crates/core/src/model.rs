//! Electronic fiber models: `H_el(x)` and the dipole field `mu(x)` on a grid.

use evalexpr::{ContextWithMutableFunctions, ContextWithMutableVariables, Function, HashMapContext, Node, Value};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fiber::{FiberField, Mat};
use crate::grid::Grid;
use crate::C64;

const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FiberModel {
    grid: Grid,
    h_el: FiberField,
    mu: FiberField,
}

/// Two level model `c(x) + (gap(x)/2) [[-cos t, sin t], [sin t, cos t]]` with `mu = dipole * sigma_x`.
///
/// `gap(x) = gap * (1 + gap_modulation * cos(2 pi x / L))`,
/// `t(x) = theta0 + theta_winding * 2 pi x / L + theta_amplitude * sin(2 pi x / L)` and
/// `c(x) = shift_amplitude * cos(2 pi x / L)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RotationParams {
    pub gap: f64,
    pub gap_modulation: f64,
    pub theta0: f64,
    pub theta_amplitude: f64,
    pub theta_winding: i32,
    pub shift_amplitude: f64,
    pub dipole: f64,
}

impl Default for RotationParams {
    fn default() -> Self {
        RotationParams {
            gap: 2.0,
            gap_modulation: 0.0,
            theta0: 0.0,
            theta_amplitude: 0.5,
            theta_winding: 0,
            shift_amplitude: 0.0,
            dipole: 1.0,
        }
    }
}

impl RotationParams {
    pub fn gap_at(&self, x: f64, length: f64) -> f64 {
        self.gap * (1.0 + self.gap_modulation * (2.0 * std::f64::consts::PI * x / length).cos())
    }

    pub fn theta_at(&self, x: f64, length: f64) -> f64 {
        let s = 2.0 * std::f64::consts::PI * x / length;
        self.theta0 + self.theta_winding as f64 * s + self.theta_amplitude * s.sin()
    }

    pub fn shift_at(&self, x: f64, length: f64) -> f64 {
        self.shift_amplitude * (2.0 * std::f64::consts::PI * x / length).cos()
    }
}

/// Three level model with `s = 2 pi x / L`,
/// `H = [[0.3 sin s, a, b], [a, 2 spacing, c], [b*, c*, 4 spacing + 0.3 cos s]]`,
/// `a = 0.6 coupling cos s`, `b = coupling (0.5 sin(s + 0.3) + 0.3 i cos 2s)`,
/// `c = coupling (0.4 sin 2s + 0.2 i sin s)` and `mu` equal to one on every off-diagonal entry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ThreeLevelParams {
    pub coupling: f64,
    pub spacing: f64,
}

impl Default for ThreeLevelParams {
    fn default() -> Self {
        ThreeLevelParams { coupling: 1.0, spacing: 1.5 }
    }
}

/// Matrix entry given as expressions in `x` (real and optional imaginary part).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EntryExpr {
    Real(String),
    Complex([String; 2]),
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

impl FiberModel {
    pub fn new(grid: Grid, h_el: FiberField, mu: FiberField) -> Result<Self> {
        if h_el.len() != grid.n() || mu.len() != grid.n() || h_el.dim() != mu.dim() {
            return Err(Error::Validation("fiber fields do not match the grid".into()));
        }
        for f in [&h_el, &mu] {
            let (i, r) = f.hermitian_residual();
            let scale = f.max_abs().max(1.0);
            if r > HERMITIAN_TOL * scale {
                return Err(Error::NonHermitianFiber { x: grid.x(i), residual: r });
            }
        }
        Ok(FiberModel { grid, h_el, mu })
    }

    pub fn rotation(grid: &Grid, p: &RotationParams) -> Result<Self> {
        let l = grid.length();
        let h = FiberField::from_fn(grid, 2, |x| {
            let t = p.theta_at(x, l);
            let a = 0.5 * p.gap_at(x, l);
            let s = p.shift_at(x, l);
            Mat::from_row_slice(2, 2, &[c(s - a * t.cos()), c(a * t.sin()), c(a * t.sin()), c(s + a * t.cos())])
        });
        let mu = FiberField::constant(grid.n(), Mat::from_row_slice(2, 2, &[c(0.0), c(p.dipole), c(p.dipole), c(0.0)]));
        FiberModel::new(grid.clone(), h, mu)
    }

    /// Clamped two level system `diag(0, gap)` with dipole `dipole * sigma_x`.
    pub fn two_level_constant(grid: &Grid, gap: f64, dipole: f64) -> Result<Self> {
        let h = FiberField::constant(grid.n(), Mat::from_row_slice(2, 2, &[c(0.0), c(0.0), c(0.0), c(gap)]));
        let mu = FiberField::constant(grid.n(), Mat::from_row_slice(2, 2, &[c(0.0), c(dipole), c(dipole), c(0.0)]));
        FiberModel::new(grid.clone(), h, mu)
    }

    pub fn three_level(grid: &Grid, p: &ThreeLevelParams) -> Result<Self> {
        let l = grid.length();
        let h = FiberField::from_fn(grid, 3, |x| {
            let s = 2.0 * std::f64::consts::PI * x / l;
            let a = c(p.coupling * 0.6 * s.cos());
            let b = C64::new(0.5 * (s + 0.3).sin(), 0.3 * (2.0 * s).cos()) * p.coupling;
            let cc = C64::new(0.4 * (2.0 * s).sin(), 0.2 * s.sin()) * p.coupling;
            Mat::from_row_slice(
                3,
                3,
                &[c(0.3 * s.sin()), a, b, a, c(2.0 * p.spacing), cc, b.conj(), cc.conj(), c(4.0 * p.spacing + 0.3 * s.cos())],
            )
        });
        let mu = FiberField::constant(grid.n(), Mat::from_fn(3, 3, |i, j| c(if i != j { 1.0 } else { 0.0 })));
        FiberModel::new(grid.clone(), h, mu)
    }

    /// Build a model from tabulated matrices, `h[point][row][col] = [re, im]`.
    pub fn tabulated(grid: &Grid, h: &[Vec<Vec<[f64; 2]>>], mu: &[Vec<Vec<[f64; 2]>>]) -> Result<Self> {
        let field = |t: &[Vec<Vec<[f64; 2]>>]| -> Result<FiberField> {
            if t.len() != grid.n() {
                return Err(Error::Validation(format!("table has {} points, the grid has {}", t.len(), grid.n())));
            }
            let d = t[0].len();
            let mats = t
                .iter()
                .map(|rows| {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::Validation("tabulated matrices must all be square of the same size".into()));
                    }
                    Ok(Mat::from_fn(d, d, |i, j| C64::new(rows[i][j][0], rows[i][j][1])))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FiberField::new(d, mats))
        };
        FiberModel::new(grid.clone(), field(h)?, field(mu)?)
    }

    /// Build a model from matrices of expressions in `x`.
    ///
    /// Available functions: `sin cos tan exp ln sqrt tanh cosh sinh abs`; constants `pi` and `L`.
    pub fn from_expressions(grid: &Grid, h: &[Vec<EntryExpr>], mu: &[Vec<EntryExpr>]) -> Result<Self> {
        let h = expression_field(grid, h)?;
        let mu = expression_field(grid, mu)?;
        FiberModel::new(grid.clone(), h, mu)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.h_el.dim()
    }

    pub fn h_el(&self) -> &FiberField {
        &self.h_el
    }

    pub fn mu(&self) -> &FiberField {
        &self.mu
    }

    /// Worst relative Fourier tail of `H_el` and `mu`.
    pub fn fourier_tail(&self) -> f64 {
        self.h_el.fourier_tail(&self.grid).max(self.mu.fourier_tail(&self.grid))
    }
}

fn expression_context(length: f64) -> Result<HashMapContext> {
    let mut ctx = HashMapContext::new();
    let unary: [(&str, fn(f64) -> f64); 10] = [
        ("sin", f64::sin),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("sqrt", f64::sqrt),
        ("tanh", f64::tanh),
        ("cosh", f64::cosh),
        ("sinh", f64::sinh),
        ("abs", f64::abs),
    ];
    for (name, f) in unary {
        ctx.set_function(name.into(), Function::new(move |a| Ok(Value::Float(f(a.as_number()?)))))
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI)).map_err(|e| Error::Validation(e.to_string()))?;
    ctx.set_value("L".into(), Value::Float(length)).map_err(|e| Error::Validation(e.to_string()))?;
    Ok(ctx)
}

/// Rewrites integer literals as floats so that `1/2` means one half.
fn float_literals(expr: &str) -> String {
    let chars: Vec<char> = expr.chars().collect();
    let mut out = String::with_capacity(expr.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let in_word = i > 0 && (chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.');
        if c.is_ascii_digit() && !in_word {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            out.extend(&chars[start..i]);
            let next = chars.get(i).copied();
            if !matches!(next, Some('.') | Some('e') | Some('E')) && !next.is_some_and(|n| n.is_alphanumeric() || n == '_') {
                out.push_str(".0");
            }
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

fn parse(expr: &str) -> Result<Node> {
    evalexpr::build_operator_tree(&float_literals(expr)).map_err(|e| Error::Validation(format!("expression `{expr}`: {e}")))
}

fn expression_field(grid: &Grid, rows: &[Vec<EntryExpr>]) -> Result<FiberField> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("expression matrix must be square and non-empty".into()));
    }
    let mut trees = Vec::with_capacity(d * d);
    for row in rows {
        for e in row {
            let (re, im) = match e {
                EntryExpr::Real(r) => (parse(r)?, None),
                EntryExpr::Complex([r, i]) => (parse(r)?, Some(parse(i)?)),
            };
            trees.push((re, im));
        }
    }
    let mut ctx = expression_context(grid.length())?;
    let mut mats = Vec::with_capacity(grid.n());
    for i in 0..grid.n() {
        ctx.set_value("x".into(), Value::Float(grid.x(i))).map_err(|e| Error::Validation(e.to_string()))?;
        let mut m = Mat::zeros(d, d);
        for (k, (re, im)) in trees.iter().enumerate() {
            let eval = |n: &Node| -> Result<f64> {
                n.eval_number_with_context(&ctx).map_err(|e| Error::Validation(format!("evaluating expression: {e}")))
            };
            let v = C64::new(eval(re)?, match im {
                Some(t) => eval(t)?,
                None => 0.0,
            });
            m[(k / d, k % d)] = v;
        }
        mats.push(m);
    }
    Ok(FiberField::new(d, mats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_literals_divide_as_floats() {
        assert_eq!(float_literals("1/2*cos(2*x) + x2 - 3.5e1"), "1.0/2.0*cos(2.0*x) + x2 - 3.5e1");
        let g = Grid::new(4, 1.0).unwrap();
        let e = vec![vec![EntryExpr::Real("1/2".into())]];
        let f = expression_field(&g, &e).unwrap();
        assert!((f.at(0)[(0, 0)].re - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expressions_match_rotation_preset() {
        let g = Grid::new(32, 2.0 * std::f64::consts::PI).unwrap();
        let p = RotationParams { gap: 2.0, theta_amplitude: 0.0, theta_winding: 1, ..Default::default() };
        let preset = FiberModel::rotation(&g, &p).unwrap();
        let e = |s: &str| EntryExpr::Real(s.to_string());
        let h = vec![vec![e("-cos(x)"), e("sin(x)")], vec![e("sin(x)"), e("cos(x)")]];
        let mu = vec![vec![e("0"), e("1")], vec![e("1"), e("0")]];
        let m = FiberModel::from_expressions(&g, &h, &mu).unwrap();
        assert!(m.h_el().sub(preset.h_el()).max_abs() < 1e-14);
        assert!(m.mu().sub(preset.mu()).max_abs() < 1e-14);
    }

    #[test]
    fn tabulated_round_trip() {
        let g = Grid::new(16, 2.0 * std::f64::consts::PI).unwrap();
        let m = FiberModel::three_level(&g, &ThreeLevelParams::default()).unwrap();
        let table = |f: &FiberField| -> Vec<Vec<Vec<[f64; 2]>>> {
            f.mats().iter().map(|m| (0..3).map(|i| (0..3).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()).collect()
        };
        let t = FiberModel::tabulated(&g, &table(m.h_el()), &table(m.mu())).unwrap();
        assert_eq!(t.h_el().sub(m.h_el()).max_abs(), 0.0);
        assert!(FiberModel::tabulated(&g, &table(m.h_el())[..8], &table(m.mu())).is_err());
    }

    #[test]
    fn non_hermitian_fiber_is_rejected() {
        let g = Grid::new(8, 1.0).unwrap();
        let e = |s: &str| EntryExpr::Real(s.to_string());
        let h = vec![vec![e("0"), e("1")], vec![e("0.5"), e("0")]];
        let mu = vec![vec![e("0"), e("1")], vec![e("1"), e("0")]];
        assert!(matches!(FiberModel::from_expressions(&g, &h, &mu), Err(Error::NonHermitianFiber { .. })));
        let hc = vec![
            vec![e("0"), EntryExpr::Complex(["0".into(), "1".into()])],
            vec![EntryExpr::Complex(["0".into(), "-1".into()]), e("0")],
        ];
        assert!(FiberModel::from_expressions(&g, &hc, &mu).is_ok());
    }
}

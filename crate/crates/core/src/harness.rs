//! Experiment configuration, task dispatch and result files.
//!
//! A run reads a TOML [`ExperimentConfig`], checks budgets before any long computation and
//! writes `results.csv` (one row per number, tagged with the config hash), `record.json` and
//! task specific files. All of these are written atomically and are byte-identical for a
//! repeated config and seed; wall-clock timings go to the separate `timings.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bands::{diagonalize_bands, BandData, BandOptions};
use crate::batch::{wavepacket, BatchOptions};
use crate::decay::{
    band_packet, compare_methods, decay_probability, fgr_static, oracle_transition, BandPropagation, CompareOptions, DecayOptions, Method,
    OracleOptions, OracleProjection,
};
use crate::dressed::{
    beta_admissible, commutator_dressed_scan, dressed_projection_scan, dyson_transition, t_delta_scan, Coupling, DressingParams,
    DysonOptions, PhotonModes, QuadratureScheme,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::krylov::KrylovOptions;
use crate::model::{EntryExpr, FiberModel, RotationParams, ThreeLevelParams};
use crate::persist::{write_atomic, write_state};
use crate::propagators::{
    adiabatic_error_scan, bo_vs_diagonal_scan, build_bo_effective, lift, project_coefficient, propagate_diagonal, propagate_full, ScanSetup,
    StrangOptions,
};
use crate::scaling::{fit_scaling, ScalingFit};
use crate::state::State;
use crate::superadiabatic::{
    band_orthogonality_check, build_projection, commutator_scaling_scan, defect_scan, distance_scan, SuperScanSetup,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Bands,
    PropagateFull,
    PropagateDiagonal,
    PropagateBo,
    ScanAdiabatic,
    ScanSuperadiabatic,
    ScanDressed,
    Decay,
    Oracle,
    Compare,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Bands => "bands",
            Task::PropagateFull => "propagate-full",
            Task::PropagateDiagonal => "propagate-diagonal",
            Task::PropagateBo => "propagate-bo",
            Task::ScanAdiabatic => "scan-adiabatic",
            Task::ScanSuperadiabatic => "scan-superadiabatic",
            Task::ScanDressed => "scan-dressed",
            Task::Decay => "decay",
            Task::Oracle => "oracle",
            Task::Compare => "compare",
        }
    }

    pub fn fits_exponents(&self) -> bool {
        matches!(self, Task::ScanAdiabatic | Task::ScanSuperadiabatic | Task::ScanDressed)
    }
}

/// Electronic fiber of the model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FiberSpec {
    Rotation(RotationParams),
    ThreeLevel(ThreeLevelParams),
    /// `diag(0, gap)` with dipole `dipole * sigma_x`
    Constant { gap: f64, dipole: f64 },
    Expressions { h: Vec<Vec<EntryExpr>>, mu: Vec<Vec<EntryExpr>> },
    /// `h[point][row][col] = [re, im]`
    Tabulated { h: Vec<Vec<Vec<[f64; 2]>>>, mu: Vec<Vec<Vec<[f64; 2]>>> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_points: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    /// photon cutoff `Lambda_0`
    #[serde(default = "default_cutoff")]
    pub uv_cutoff: f64,
    /// final band `i` of the transition
    #[serde(default)]
    pub lower: usize,
    /// initial band `j`
    #[serde(default = "default_upper")]
    pub upper: usize,
    pub fiber: FiberSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PacketConfig {
    pub x0: f64,
    pub p0: f64,
    pub sigma: f64,
    /// start from the purified superadiabatic projection of the packet
    pub purified: bool,
}

impl Default for PacketConfig {
    fn default() -> Self {
        PacketConfig { x0: 1.5, p0: 0.5, sigma: 0.5, purified: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub max_state_dim: usize,
    pub max_steps: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_state_dim: 1 << 22, max_steps: 1 << 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Set by the subcommand when run from the command line.
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ladder")]
    pub eps: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// `delta` in place of `eps^{1/2 - (beta - 5/6)/5}`
    #[serde(default)]
    pub delta_override: Option<f64>,
    #[serde(default)]
    pub unsafe_beta: bool,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_quadrature")]
    pub quadrature: QuadratureScheme,
    /// macroscopic time horizon
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_order")]
    pub order: u32,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// methods of `decay` and `compare`; `rate-formula` is always evaluated
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub with_t2: bool,
    #[serde(default = "default_propagation")]
    pub propagation: BandPropagation,
    #[serde(default = "default_projection")]
    pub oracle_projection: OracleProjection,
    #[serde(default)]
    pub packet: PacketConfig,
    #[serde(default)]
    pub budget: Budget,
    pub model: ModelConfig,
}

fn default_length() -> f64 {
    2.0 * std::f64::consts::PI
}
fn default_cutoff() -> f64 {
    5.0
}
fn default_upper() -> usize {
    1
}
fn default_ladder() -> Vec<f64> {
    vec![0.125, 0.0625, 0.03125]
}
fn default_beta() -> f64 {
    1.0
}
fn default_modes() -> usize {
    256
}
fn default_quadrature() -> QuadratureScheme {
    QuadratureScheme::UniformMidpoint
}
fn default_t() -> f64 {
    1.0
}
fn default_batch() -> usize {
    16
}
fn default_order() -> u32 {
    2
}
fn default_samples() -> usize {
    32
}
fn default_propagation() -> BandPropagation {
    BandPropagation::Diagonal
}
fn default_projection() -> OracleProjection {
    OracleProjection::Bare
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse a TOML config; errors name the line and, where known, the key.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Parse { line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0), message: e.message().to_string() })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg = parse_config_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad(format!("eps: every value must lie in (0, 1), got {:?}", self.eps));
        }
        if let Some(task) = self.task {
            if task.fits_exponents() && self.eps.len() < 3 {
                return bad(format!("eps: {} fits exponents and needs at least 3 values, got {}", task.name(), self.eps.len()));
            }
        }
        if !self.unsafe_beta && !beta_admissible(self.beta) {
            return bad(format!("beta: {} is outside (5/6, 4/3]; pass --unsafe-beta to run anyway", self.beta));
        }
        for &eps in &self.eps {
            self.params(eps).validate(self.unsafe_beta)?;
        }
        if self.modes < 8 {
            return bad(format!("modes: {} is below 8", self.modes));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return bad(format!("t: {} must be finite and non-negative", self.t));
        }
        if self.batch == 0 || self.samples == 0 {
            return bad("batch and samples must be positive".into());
        }
        if !(1..=2).contains(&self.order) {
            return bad(format!("order: {} must be 1 or 2", self.order));
        }
        let m = &self.model;
        if m.lower >= m.upper {
            return bad(format!("model.lower = {} must be below model.upper = {}", m.lower, m.upper));
        }
        if !(m.uv_cutoff > 0.0) {
            return bad(format!("model.uv_cutoff: {} must be positive", m.uv_cutoff));
        }
        if !(self.packet.sigma > 0.0) {
            return bad(format!("packet.sigma: {} must be positive", self.packet.sigma));
        }
        Ok(())
    }

    pub fn params(&self, eps: f64) -> DressingParams {
        let p = DressingParams::new(eps, self.beta);
        match self.delta_override {
            Some(d) => p.with_delta(d),
            None => p,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    fn batch_options(&self) -> BatchOptions {
        BatchOptions { count: self.batch, ..Default::default() }
    }
}

/// Grid, model and bands of a config, with the cutoff checked against the band gap.
pub fn build_model(cfg: &ModelConfig) -> Result<(Arc<FiberModel>, BandData)> {
    let grid = Grid::new(cfg.n_points, cfg.length)?;
    let model = match &cfg.fiber {
        FiberSpec::Rotation(p) => FiberModel::rotation(&grid, p)?,
        FiberSpec::ThreeLevel(p) => FiberModel::three_level(&grid, p)?,
        FiberSpec::Constant { gap, dipole } => FiberModel::two_level_constant(&grid, *gap, *dipole)?,
        FiberSpec::Expressions { h, mu } => FiberModel::from_expressions(&grid, h, mu)?,
        FiberSpec::Tabulated { h, mu } => FiberModel::tabulated(&grid, h, mu)?,
    };
    if cfg.upper >= model.dim() {
        return Err(Error::Validation(format!("model.upper = {} but the fiber has dimension {}", cfg.upper, model.dim())));
    }
    let bands = diagonalize_bands(&model, &BandOptions::default())?;
    let widest = bands.energies(cfg.upper).iter().zip(bands.energies(cfg.lower)).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
    if !(cfg.uv_cutoff > widest) {
        return Err(Error::Validation(format!("model.uv_cutoff = {} must exceed the largest gap {widest}", cfg.uv_cutoff)));
    }
    Ok((Arc::new(model), bands))
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub method: String,
    pub eps: Option<f64>,
    pub t: Option<f64>,
    pub quantity: String,
    pub value: f64,
}

fn row(method: &str, eps: Option<f64>, t: Option<f64>, quantity: &str, value: f64) -> Row {
    Row { method: method.into(), eps, t, quantity: quantity.into(), value }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub task: Task,
    pub seed: u64,
    pub beta: f64,
    pub files: Vec<String>,
    pub fits: BTreeMap<String, ScalingFit>,
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub rows: Vec<Row>,
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `config_hash,method,eps,beta,t,quantity,value` with shortest round-trip floats.
pub fn render_csv(hash: &str, beta: f64, rows: &[Row]) -> String {
    let mut out = String::from("config_hash,method,eps,beta,t,quantity,value\n");
    for r in rows {
        let _ = writeln!(out, "{hash},{},{},{beta:e},{},{},{:e}", r.method, fmt_opt(r.eps), fmt_opt(r.t), r.quantity, r.value);
    }
    out
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    model: Arc<FiberModel>,
    bands: BandData,
    rows: Vec<Row>,
    fits: BTreeMap<String, ScalingFit>,
    diagnostics: BTreeMap<String, f64>,
    files: Vec<String>,
}

impl Ctx<'_> {
    fn fit(&mut self, name: &str, method: &str, eps: &[f64], values: &[f64], fit: ScalingFit) {
        for (e, v) in eps.iter().zip(values) {
            self.rows.push(row(method, Some(*e), None, name, *v));
        }
        if fit.degenerate {
            log::warn!("{name}: degenerate (values below floor 1e-9)");
        }
        self.fits.insert(name.into(), fit);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        self.files.push(name.into());
        Ok(())
    }

    fn packet(&self, eps: f64) -> Result<State> {
        let p = &self.cfg.packet;
        let j = self.cfg.model.upper;
        if p.purified {
            let proj = build_projection(&self.model, &self.bands, j, eps, 2, &self.cfg.batch_options(), self.cfg.seed)?;
            Ok(band_packet(&self.bands, j, p.x0, p.p0, p.sigma, eps, Some(&proj.purified)))
        } else {
            Ok(band_packet(&self.bands, j, p.x0, p.p0, p.sigma, eps, None))
        }
    }

    fn coupling(&self) -> Result<Arc<Coupling>> {
        let modes = PhotonModes::new(self.cfg.model.uv_cutoff, self.cfg.modes, self.cfg.quadrature)?;
        let gaps: Vec<f64> =
            self.bands.energies(self.cfg.model.upper).iter().zip(self.bands.energies(self.cfg.model.lower)).map(|(a, b)| a - b).collect();
        modes.check_resonance(&gaps)?;
        Ok(Arc::new(Coupling::new(&self.model, Arc::new(modes))))
    }

    fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            samples: self.cfg.samples,
            projection: self.cfg.oracle_projection,
            max_state_dim: self.cfg.budget.max_state_dim,
            max_steps: self.cfg.budget.max_steps,
            batch: self.cfg.batch_options(),
            seed: self.cfg.seed,
            ..Default::default()
        }
    }

    fn methods(&self, default: &[Method]) -> Vec<Method> {
        self.cfg.methods.clone().unwrap_or_else(|| default.to_vec())
    }
}

/// Size checks that fail before any propagation starts.
pub fn check_budget(cfg: &ExperimentConfig, d: usize) -> Result<()> {
    let n = cfg.model.n_points;
    let exceeded = |what: String| Err(Error::BudgetExceeded(what));
    let dressed = matches!(cfg.task, Some(Task::ScanDressed | Task::Oracle | Task::Compare));
    let dim = n * d * if dressed { 1 + cfg.modes } else { 1 };
    if dim > cfg.budget.max_state_dim {
        return exceeded(format!("state dimension {dim} exceeds budget.max_state_dim = {}", cfg.budget.max_state_dim));
    }
    let strang = matches!(cfg.task, Some(Task::PropagateFull | Task::ScanAdiabatic));
    let dyson = matches!(cfg.task, Some(Task::Compare | Task::Decay))
        && cfg.methods.as_ref().map_or(cfg.task == Some(Task::Compare), |m| m.contains(&Method::Dyson));
    for &eps in &cfg.eps {
        let mut steps = 0usize;
        if strang {
            steps = steps.max((4096.0 / eps).ceil() as usize);
        }
        if dyson {
            steps = steps.max((2.0 * 64.0 * cfg.t / eps).ceil() as usize);
        }
        if steps > cfg.budget.max_steps {
            return exceeded(format!("about {steps} time steps at eps = {eps} exceed budget.max_steps = {}", cfg.budget.max_steps));
        }
    }
    Ok(())
}

/// Run the config's task and write its result files into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let task = cfg.task.ok_or_else(|| Error::Validation("no task given".into()))?;
    let hash = cfg.hash();
    let start = Instant::now();
    let (model, bands) = build_model(&cfg.model)?;
    check_budget(cfg, model.dim())?;
    let mut timings = BTreeMap::new();
    timings.insert("setup".to_string(), start.elapsed().as_secs_f64());
    log::info!("running {} with config {hash}", task.name());
    let mut ctx =
        Ctx { cfg, out, model, bands, rows: Vec::new(), fits: BTreeMap::new(), diagnostics: BTreeMap::new(), files: Vec::new() };
    let t0 = Instant::now();
    match task {
        Task::Bands => run_bands(&mut ctx)?,
        Task::PropagateFull | Task::PropagateDiagonal | Task::PropagateBo => run_propagate(&mut ctx, task)?,
        Task::ScanAdiabatic => run_scan_adiabatic(&mut ctx)?,
        Task::ScanSuperadiabatic => run_scan_superadiabatic(&mut ctx)?,
        Task::ScanDressed => run_scan_dressed(&mut ctx)?,
        Task::Decay => run_decay(&mut ctx)?,
        Task::Oracle => run_oracle(&mut ctx)?,
        Task::Compare => run_compare(&mut ctx)?,
    }
    timings.insert(task.name().to_string(), t0.elapsed().as_secs_f64());
    let csv = render_csv(&hash, cfg.beta, &ctx.rows);
    ctx.write("results.csv", csv.as_bytes())?;
    let mut record = RunRecord {
        config_hash: hash,
        task,
        seed: cfg.seed,
        beta: cfg.beta,
        files: Vec::new(),
        fits: std::mem::take(&mut ctx.fits),
        diagnostics: std::mem::take(&mut ctx.diagnostics),
        rows: std::mem::take(&mut ctx.rows),
        timings,
    };
    ctx.files.push("record.json".into());
    ctx.files.sort();
    record.files = ctx.files.clone();
    write_atomic(&out.join("record.json"), &to_json(&record)?)?;
    write_atomic(&out.join("timings.json"), &to_json(&record.timings)?)?;
    Ok(record)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Validation(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn run_bands(ctx: &mut Ctx) -> Result<()> {
    let (i, j) = (ctx.cfg.model.lower, ctx.cfg.model.upper);
    let b = &ctx.bands;
    let gap = b.gap(j);
    let dip = b.dipole(i, j, ctx.model.mu());
    let (conn, holonomy) = b.berry_connection(j);
    let mut csv = String::from("x,E_i,E_j,gap_j,abs_D_ij,A_j\n");
    for k in 0..b.grid().n() {
        let _ = writeln!(
            csv,
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            b.grid().x(k),
            b.energies(i)[k],
            b.energies(j)[k],
            gap[k],
            dip[k].norm(),
            conn[k]
        );
    }
    let min_gap = gap.iter().copied().fold(f64::INFINITY, f64::min);
    let eig = b.eigen_residual(&ctx.model);
    let comm = b.commutator_residual(&ctx.model, i, j);
    for (q, v) in [("min_gap", min_gap), ("holonomy", holonomy), ("eigen_residual", eig), ("commutator_residual", comm)] {
        ctx.rows.push(row("bands", None, None, q, v));
        ctx.diagnostics.insert(q.into(), v);
    }
    ctx.write("bands.csv", csv.as_bytes())
}

fn run_propagate(ctx: &mut Ctx, task: Task) -> Result<()> {
    let j = ctx.cfg.model.upper;
    let t = ctx.cfg.t;
    let p = ctx.bands.projector(j);
    let method = task.name().trim_start_matches("propagate-").to_string();
    for (k, &eps) in ctx.cfg.eps.iter().enumerate() {
        let pk = &ctx.cfg.packet;
        let psi0 = wavepacket(&ctx.bands, &[(j, crate::C64::new(1.0, 0.0))], pk.x0, pk.p0, pk.sigma, eps);
        let psi = match task {
            Task::PropagateFull => propagate_full(ctx.model.clone(), &psi0, t, eps, &StrangOptions::default())?,
            Task::PropagateDiagonal => propagate_diagonal(ctx.model.clone(), &ctx.bands, j, &psi0, t, eps, &KrylovOptions::default())?,
            _ => {
                let bo = build_bo_effective(&ctx.bands, j, eps, true);
                let c = project_coefficient(&ctx.bands, j, &psi0);
                lift(&ctx.bands, j, &bo.propagate(&c, t, &KrylovOptions::default())?)
            }
        };
        let population = p.apply(&psi).norm_sqr();
        ctx.rows.push(row(&method, Some(eps), Some(t), "norm", psi.norm()));
        ctx.rows.push(row(&method, Some(eps), Some(t), "band_population", population));
        ctx.rows.push(row(&method, Some(eps), Some(t), "norm_drift", (psi.norm() - psi0.norm()).abs()));
        let name = format!("state_{method}_{k}.bin");
        write_state(&ctx.out.join(&name), &psi)?;
        ctx.files.push(name);
    }
    Ok(())
}

fn run_scan_adiabatic(ctx: &mut Ctx) -> Result<()> {
    let setup = ScanSetup { band: ctx.cfg.model.upper, t: ctx.cfg.t, batch: ctx.cfg.batch_options(), seed: ctx.cfg.seed, ..Default::default() };
    let r = adiabatic_error_scan(ctx.model.clone(), &ctx.bands, &ctx.cfg.eps, &setup)?;
    ctx.fit("adiabatic_error", "full-vs-diagonal", &r.eps, &r.values, r.fit);
    let r = bo_vs_diagonal_scan(ctx.model.clone(), &ctx.bands, &ctx.cfg.eps, &setup)?;
    ctx.fit("bo_error", "bo-vs-diagonal", &r.eps, &r.values, r.fit);
    Ok(())
}

fn run_scan_superadiabatic(ctx: &mut Ctx) -> Result<()> {
    let setup = SuperScanSetup {
        band: ctx.cfg.model.upper,
        partner: ctx.cfg.model.lower,
        order: ctx.cfg.order,
        purified: true,
        batch: ctx.cfg.batch_options(),
        seed: ctx.cfg.seed,
    };
    let ladder = ctx.cfg.eps.clone();
    let method = format!("order{}", ctx.cfg.order);
    let r = defect_scan(&ctx.model, &ctx.bands, &ladder, &setup)?;
    ctx.fit("defect", &method, &r.eps, &r.values, r.fit);
    let r = distance_scan(&ctx.model, &ctx.bands, &ladder, &setup)?;
    ctx.fit("distance", &method, &r.eps, &r.values, r.fit);
    let r = commutator_scaling_scan(ctx.model.clone(), &ctx.bands, &ladder, &setup)?;
    ctx.fit("commutator", &method, &r.eps, &r.values, r.fit);
    let r = band_orthogonality_check(&ctx.model, &ctx.bands, &ladder, &setup)?;
    ctx.fit("orthogonality", &method, &r.eps, &r.values, r.fit);
    Ok(())
}

fn run_scan_dressed(ctx: &mut Ctx) -> Result<()> {
    let coupling = ctx.coupling()?;
    let j = ctx.cfg.model.upper;
    let ladder = ctx.cfg.eps.clone();
    let (beta, batch, seed) = (ctx.cfg.beta, ctx.cfg.batch_options(), ctx.cfg.seed);
    let deltas: Vec<f64> = ladder.iter().map(|&e| ctx.cfg.params(e).delta).collect();
    let d = t_delta_scan(&ctx.model, &ctx.bands, &coupling, j, &deltas)?;
    for (q, vals, fit) in [("t_delta_norm", &d.norms, d.norm_fit.clone()), ("t_delta_gradient", &d.gradient_norms, d.gradient_fit.clone())] {
        for (e, (dl, v)) in ladder.iter().zip(deltas.iter().zip(vals)) {
            ctx.rows.push(row("dressed", Some(*e), None, q, *v));
            ctx.rows.push(row("dressed", Some(*e), None, "delta", *dl));
        }
        ctx.fits.insert(format!("{q}_vs_delta"), fit);
    }
    let s = dressed_projection_scan(&ctx.model, &ctx.bands, &coupling, j, &ladder, beta, &batch, seed)?;
    ctx.fit("vacuum_distance", "dressed", &s.distance.eps, &s.distance.values, s.distance.fit.clone());
    ctx.fit("vacuum_defect", "dressed", &s.defect.eps, &s.defect.values, s.defect.fit.clone());
    let c = commutator_dressed_scan(ctx.model.clone(), &ctx.bands, coupling, j, &ladder, beta, &batch, seed)?;
    ctx.fit("vacuum_commutator", "dressed", &c.commutator.eps, &c.commutator.values, c.commutator.fit.clone());
    ctx.fit("vacuum_commutator_residual", "dressed", &c.residual.eps, &c.residual.values, c.residual.fit.clone());
    Ok(())
}

fn decay_options(cfg: &ExperimentConfig) -> DecayOptions {
    DecayOptions { samples: cfg.samples, propagation: cfg.propagation, ..Default::default() }
}

fn run_decay(ctx: &mut Ctx) -> Result<()> {
    let (i, j) = (ctx.cfg.model.lower, ctx.cfg.model.upper);
    let t = ctx.cfg.t;
    let methods = ctx.methods(&[Method::RateFormula, Method::FgrStatic]);
    let coupling = if methods.iter().any(|m| matches!(m, Method::Dyson | Method::Oracle)) { Some(ctx.coupling()?) } else { None };
    let x0 = ctx.cfg.packet.x0.rem_euclid(ctx.bands.grid().length());
    let k0 = ((x0 / ctx.bands.grid().spacing()).round() as usize) % ctx.bands.grid().n();
    let delta_e = ctx.bands.energies(j)[k0] - ctx.bands.energies(i)[k0];
    let dipole = ctx.bands.dipole(i, j, ctx.model.mu())[k0].norm();
    for &eps in &ctx.cfg.eps.clone() {
        let params = ctx.cfg.params(eps);
        let psi0 = ctx.packet(eps)?;
        let curve = decay_probability(ctx.model.clone(), &ctx.bands, i, j, &psi0, t, &params, &decay_options(ctx.cfg))?;
        for (s, p) in curve.times.iter().zip(&curve.probability) {
            ctx.rows.push(row("rate-formula", Some(eps), Some(*s), "probability", *p));
        }
        for m in &methods {
            match m {
                Method::RateFormula => {}
                Method::FgrStatic => {
                    let alpha = eps.powf(ctx.cfg.beta);
                    for s in &curve.times {
                        let p = fgr_static(delta_e, dipole, alpha, s / eps)?;
                        ctx.rows.push(row("fgr-static", Some(eps), Some(*s), "probability", p));
                    }
                }
                Method::Dyson => {
                    let opts = DysonOptions { with_t2: ctx.cfg.with_t2, ..Default::default() };
                    let c = coupling.as_ref().expect("coupling built for dyson");
                    let r = dyson_transition(ctx.model.clone(), &ctx.bands, c, i, j, &psi0, t, &params, &opts)?;
                    ctx.rows.push(row("dyson", Some(eps), Some(t), "probability", r.probability));
                    if let Some(rc) = r.rel_change {
                        ctx.rows.push(row("dyson", Some(eps), Some(t), "step_doubling_change", rc));
                    }
                }
                Method::Oracle => {
                    let c = coupling.clone().expect("coupling built for the oracle");
                    let r = oracle_transition(ctx.model.clone(), &ctx.bands, c, i, &psi0, t, &params, &ctx.oracle_options())?;
                    push_oracle(ctx, eps, &r);
                }
            }
        }
    }
    Ok(())
}

fn push_oracle(ctx: &mut Ctx, eps: f64, r: &crate::decay::OracleResult) {
    for (s, p) in r.curve.times.iter().zip(&r.curve.probability) {
        ctx.rows.push(row("oracle", Some(eps), Some(*s), "probability", *p));
    }
    let t = r.curve.times.last().copied();
    ctx.rows.push(row("oracle", Some(eps), t, "norm_drift", r.norm_drift));
    ctx.rows.push(row("oracle", Some(eps), t, "dropped_weight", r.dropped_weight));
    let drift = ctx.diagnostics.entry("max_norm_drift".into()).or_insert(0.0);
    *drift = drift.max(r.norm_drift);
    let dropped = ctx.diagnostics.entry("max_dropped_weight".into()).or_insert(0.0);
    *dropped = dropped.max(r.dropped_weight);
}

fn run_oracle(ctx: &mut Ctx) -> Result<()> {
    let coupling = ctx.coupling()?;
    let i = ctx.cfg.model.lower;
    for &eps in &ctx.cfg.eps.clone() {
        let params = ctx.cfg.params(eps);
        let psi0 = ctx.packet(eps)?;
        let r = oracle_transition(ctx.model.clone(), &ctx.bands, coupling.clone(), i, &psi0, ctx.cfg.t, &params, &ctx.oracle_options())?;
        push_oracle(ctx, eps, &r);
    }
    Ok(())
}

fn run_compare(ctx: &mut Ctx) -> Result<()> {
    let (i, j) = (ctx.cfg.model.lower, ctx.cfg.model.upper);
    let methods = ctx.methods(&[Method::RateFormula, Method::Dyson, Method::Oracle]);
    let coupling = ctx.coupling()?;
    let opts = CompareOptions {
        dyson: methods.contains(&Method::Dyson).then(|| DysonOptions { with_t2: ctx.cfg.with_t2, ..Default::default() }),
        oracle: methods.contains(&Method::Oracle).then(|| ctx.oracle_options()),
        decay: decay_options(ctx.cfg),
        delta_override: ctx.cfg.delta_override,
    };
    let ladder = ctx.cfg.eps.clone();
    let cmp = {
        let this = &*ctx;
        compare_methods(this.model.clone(), &this.bands, i, j, this.cfg.t, &ladder, this.cfg.beta, &opts, |eps| {
            Ok((coupling.clone(), this.packet(eps)?))
        })?
    };
    let t = Some(ctx.cfg.t);
    for r in &cmp.rows {
        ctx.rows.push(row("rate-formula", Some(r.eps), t, "probability", r.rate_formula));
        let optional = [
            ("dyson", "probability", r.dyson),
            ("dyson", "relative_deviation", r.dyson_deviation),
            ("oracle", "probability", r.oracle),
            ("oracle", "relative_deviation", r.oracle_deviation),
            ("oracle", "norm_drift", r.norm_drift),
            ("oracle", "dropped_weight", r.dropped_weight),
        ];
        for (m, q, v) in optional {
            if let Some(v) = v {
                ctx.rows.push(row(m, Some(r.eps), t, q, v));
            }
        }
    }
    for (name, flag) in [("oracle_deviation_decreasing", cmp.oracle_decreasing), ("dyson_deviation_decreasing", cmp.dyson_decreasing)] {
        if let Some(f) = flag {
            ctx.diagnostics.insert(name.into(), if f { 1.0 } else { 0.0 });
        }
    }
    let json = to_json(&cmp)?;
    ctx.write("comparison.json", &json)
}

/// Exponent fits of every `(method, quantity, t)` group with at least three `eps` values in a
/// results CSV; written to `fits.json` in `out`.
pub fn fit_results(input: &Path, out: &Path) -> Result<BTreeMap<String, ScalingFit>> {
    let text = std::fs::read_to_string(input)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or_default();
    if header != "config_hash,method,eps,beta,t,quantity,value" {
        return Err(Error::Parse { line: 1, message: format!("unexpected header `{header}`") });
    }
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse { line: n + 1, message: format!("`{s}` is not a number") }) };
        if f.len() != 7 {
            return Err(Error::Parse { line: n + 1, message: format!("expected 7 fields, found {}", f.len()) });
        }
        if f[2].is_empty() {
            continue;
        }
        let key = if f[4].is_empty() { format!("{}/{}", f[1], f[5]) } else { format!("{}/{}/t={}", f[1], f[5], f[4]) };
        groups.entry(key).or_default().push((num(f[2])?, num(f[6])?));
    }
    let mut fits = BTreeMap::new();
    for (key, pts) in groups {
        if pts.len() < 3 || pts.iter().any(|(_, v)| *v <= 0.0) {
            continue;
        }
        let (e, v): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        fits.insert(key, fit_scaling(&e, &v)?);
    }
    write_atomic(&out.join("fits.json"), &to_json(&fits)?)?;
    Ok(fits)
}

/// Output directory used when none is given.
pub fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", cfg.task.map(|t| t.name()).unwrap_or("run"), cfg.hash()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nn_points = 32\n[model.fiber]\nkind = \"rotation\"\n";

    #[test]
    fn minimal_config_has_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!((c.beta, c.modes, c.batch, c.order), (1.0, 256, 16, 2));
        assert_eq!(c.delta_override, None);
        let p = c.params(0.125);
        assert!((p.delta - 0.125f64.powf(0.5 - (1.0 - 5.0 / 6.0) / 5.0)).abs() < 1e-15);
        assert_eq!(c.model.fiber, FiberSpec::Rotation(RotationParams::default()));
    }

    #[test]
    fn validation_errors() {
        let mut c = parse_config_str(MINIMAL).unwrap();
        c.beta = 0.5;
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        c.unsafe_beta = true;
        c.validate().unwrap();
        let mut c = parse_config_str(MINIMAL).unwrap();
        c.task = Some(Task::ScanAdiabatic);
        c.eps = vec![0.1, 0.05];
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        c.task = Some(Task::Decay);
        c.validate().unwrap();
    }

    #[test]
    fn parse_errors_name_line_and_key() {
        let text = format!("{MINIMAL}bogus = 3\n");
        match parse_config_str(&text) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("bogus"), "{message}"),
            other => panic!("{other:?}"),
        }
        match parse_config_str("beta = \"x\"\n[model]\nn_points = 32\n[model.fiber]\nkind = \"rotation\"\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn budget_precheck() {
        let mut c = parse_config_str(MINIMAL).unwrap();
        c.task = Some(Task::Oracle);
        c.budget.max_state_dim = 1000;
        assert!(matches!(check_budget(&c, 2), Err(Error::BudgetExceeded(_))));
        c.task = Some(Task::PropagateFull);
        c.budget.max_steps = 100;
        assert!(matches!(check_budget(&c, 2), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config_str(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}

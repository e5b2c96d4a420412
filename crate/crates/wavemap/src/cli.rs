//! Batch front end: TOML run configurations, the four experiments
//! (solve, verify-estimates, scatter, converge) and deterministic artifact
//! output. The `wavemap` binary is a thin argument parser over this module.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::estimates::{self, EstimateReport};
use crate::fields::{fmt17, lattice_count, CellField, FieldError, NullLattice};
use crate::geometry::{check_compatibility, EmbeddedManifold, GeometryError, ManifoldData};
use crate::scattering::{self, ScatterError};
use crate::solver::{self, ContractionBudget, SolveOptions, SolverError, Solution};
use crate::Trapezoid;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("initial velocity is not tangent to the target (defect {0})")]
    Compatibility(f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{0} estimate checks failed")]
    EstimateFailure(usize),
    #[error(transparent)]
    Scatter(#[from] ScatterError),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit code, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compatibility(_) => 3,
            CliError::Solver(_) => 4,
            CliError::EstimateFailure(_) => 5,
            CliError::Scatter(_) => 6,
            CliError::Io(_) => 7,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Io(e) => CliError::Io(e.to_string()),
            FieldError::Csv(e) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Verify,
    Scatter,
    Converge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub x0: f64,
    pub half_length: f64,
    pub height: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Constant { point: Vec<f64> },
    /// u0 = (1, 0, 0), v0 = ω(0, 1, 0).
    Geodesic { omega: f64 },
    /// u0 on the great circle through e1, e2 at angle amplitude·sin(x),
    /// v0 = −Du0: a wave moving right at unit speed.
    TravelingWave { amplitude: f64 },
    /// Bump of the given amplitude rotating e3 towards e1 on [−support,
    /// support], v0 = 0.
    Bump { amplitude: f64, support: f64 },
    /// CSV with columns x, u_1..u_d, v_1..v_d on the base nodes; the v
    /// entries of the last row are ignored.
    Table { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForcingConfig {
    Zero,
    /// direction·amplitude·(1 − r²)² on the disc of `radius` around
    /// (t_center, x_center).
    Pulse { amplitude: f64, t_center: f64, x_center: f64, radius: f64, direction: Vec<f64> },
    /// direction·amplitude·(1 − (t + |x|)/support)² inside t + |x| ≤ support.
    Cone { amplitude: f64, support: f64, direction: Vec<f64> },
}

impl Default for ForcingConfig {
    fn default() -> Self {
        ForcingConfig::Zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_tol_m")]
    pub tol_m: f64,
    #[serde(default = "default_tol_compat")]
    pub tol_compat: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Replaces η from the budget rule.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Forced tile half-length.
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_residual_tol() -> f64 {
    1e-12
}
fn default_tol_m() -> f64 {
    1e-2
}
fn default_tol_compat() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    500
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            residual_tol: default_residual_tol(),
            tol_m: default_tol_m(),
            tol_compat: default_tol_compat(),
            max_iter: default_max_iter(),
            eta: None,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_verify_tol")]
    pub tol: f64,
}

fn default_trials() -> usize {
    200
}
fn default_verify_tol() -> f64 {
    1e-12
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { trials: default_trials(), tol: default_verify_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterConfig {
    /// Cells on the compactified base [−π/2, π/2].
    pub n_compact: usize,
    /// Defect series from t_start to the top of the domain.
    pub t_start: f64,
    /// Support half-width S for the cone check.
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Lattice spacings, coarse to fine.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_target")]
    pub target: String,
    pub domain: DomainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub forcing: ForcingConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub scatter: Option<ScatterConfig>,
    #[serde(default)]
    pub converge: Option<ConvergeConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_target() -> String {
    "sphere:3".into()
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self, CliError> {
        let c: RunConfig = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let s = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Schema checks that need no computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.domain;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if !(d.h > 0.0) || !d.h.is_finite() {
            return bad("domain.h must be positive");
        }
        if !(d.half_length > 0.0) || !(d.height > 0.0) || d.height > d.half_length {
            return bad("domain needs 0 < height <= half_length");
        }
        if lattice_count(2.0 * d.half_length, d.h).is_none() || lattice_count(2.0 * d.height, d.h).is_none() {
            return bad("domain.h must divide the base length and twice the height");
        }
        if let Some(c) = &self.converge {
            if c.levels.len() < 3 {
                return bad("converge.levels needs at least three spacings");
            }
        }
        EmbeddedManifold::<f64>::from_target(&self.target)?;
        Ok(())
    }
}

/// Everything a run needs, built from the configuration.
pub struct Instance {
    pub manifold: EmbeddedManifold<f64>,
    pub lattice: NullLattice<f64>,
    pub data: ManifoldData<f64>,
    pub forcing: CellField<f64>,
    pub budget: ContractionBudget<f64>,
    pub opts: SolveOptions<f64>,
}

fn forcing_value(forcing: &ForcingConfig, dim: usize, t: f64, x: f64) -> Vec<f64> {
    match forcing {
        ForcingConfig::Zero => vec![0.0; dim],
        ForcingConfig::Pulse { amplitude, t_center, x_center, radius, direction } => {
            let r2 = ((t - t_center) / radius).powi(2) + ((x - x_center) / radius).powi(2);
            let w = if r2 < 1.0 { amplitude * (1.0 - r2).powi(2) } else { 0.0 };
            direction.iter().map(|d| d * w).collect()
        }
        ForcingConfig::Cone { amplitude, support, direction } => {
            let s = (t + x.abs()) / support;
            let w = if s < 1.0 { amplitude * (1.0 - s).powi(2) } else { 0.0 };
            direction.iter().map(|d| d * w).collect()
        }
    }
}

fn build_data(spec: &DataConfig, dim: usize, h: f64, x_start: f64, n: usize) -> Result<ManifoldData<f64>, CliError> {
    let need3 = |what: &str| {
        if dim != 3 {
            Err(CliError::Config(format!("{what} data need a target in R^3")))
        } else {
            Ok(())
        }
    };
    Ok(match spec {
        DataConfig::Constant { point } => {
            if point.len() != dim {
                return Err(CliError::Config("constant point has the wrong dimension".into()));
            }
            ManifoldData::from_fns(dim, h, x_start, n, |_| point.clone(), |_| vec![0.0; dim])
        }
        DataConfig::Geodesic { omega } => {
            need3("geodesic")?;
            let w = *omega;
            ManifoldData::from_fns(3, h, x_start, n, |_| vec![1.0, 0.0, 0.0], move |_| vec![0.0, w, 0.0])
        }
        DataConfig::TravelingWave { amplitude } => {
            need3("traveling-wave")?;
            let a = *amplitude;
            let mut d = ManifoldData::from_fns(
                3,
                h,
                x_start,
                n,
                move |x| {
                    let th = a * x.sin();
                    vec![th.cos(), th.sin(), 0.0]
                },
                |_| vec![0.0; 3],
            );
            for i in 0..n {
                let du = d.du0(i);
                for j in 0..3 {
                    d.v0[i * 3 + j] = -du[j];
                }
            }
            d
        }
        DataConfig::Bump { amplitude, support } => {
            need3("bump")?;
            let (a, s) = (*amplitude, *support);
            ManifoldData::from_fns(
                3,
                h,
                x_start,
                n,
                move |x| {
                    let r = x / s;
                    let th = if r.abs() < 1.0 { a * (1.0 - r * r).powi(3) } else { 0.0 };
                    vec![th.sin(), 0.0, th.cos()]
                },
                |_| vec![0.0; 3],
            )
        }
        DataConfig::Table { file } => read_table(file, dim, h, x_start, n)?,
    })
}

fn read_table(file: &Path, dim: usize, h: f64, x_start: f64, n: usize) -> Result<ManifoldData<f64>, CliError> {
    let mut rd = csv::Reader::from_path(file).map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
    let mut u0 = Vec::new();
    let mut v0 = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        if rec.len() != 1 + 2 * dim {
            return Err(CliError::Config(format!("table rows need {} columns", 1 + 2 * dim)));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("bad number `{s}`"))))
            .collect::<Result<_, _>>()?;
        let x = x_start + h * rows as f64;
        if (vals[0] - x).abs() > 1e-9 * (1.0 + x.abs()) {
            return Err(CliError::Config(format!("table node {rows} is at {} instead of {x}", vals[0])));
        }
        u0.extend_from_slice(&vals[1..=dim]);
        if rows < n {
            v0.extend_from_slice(&vals[1 + dim..]);
        }
        rows += 1;
    }
    if rows != n + 1 {
        return Err(CliError::Config(format!("table has {rows} nodes, the base has {}", n + 1)));
    }
    Ok(ManifoldData::new(dim, h, x_start, u0, v0)?)
}

pub fn build_instance(c: &RunConfig) -> Result<Instance, CliError> {
    c.validate()?;
    let manifold = EmbeddedManifold::<f64>::from_target(&c.target)?;
    let d = &c.domain;
    let k = Trapezoid::compact(d.x0, d.half_length, d.height).map_err(|e| CliError::Config(e.to_string()))?;
    let lattice = NullLattice::from_trapezoid(&k, d.h).map_err(|e| CliError::Config(e.to_string()))?;
    let dim = manifold.ambient_dim;
    let data = build_data(&c.data, dim, d.h, lattice.x_left, lattice.n)?;
    if let ForcingConfig::Pulse { direction, .. } | ForcingConfig::Cone { direction, .. } = &c.forcing {
        if direction.len() != dim {
            return Err(CliError::Config("forcing direction has the wrong dimension".into()));
        }
    }
    let forcing = CellField::from_fn(lattice, dim, |t, x| forcing_value(&c.forcing, dim, t, x));
    let rep = check_compatibility(&manifold, &data, c.solver.tol_compat);
    if !rep.ok {
        return Err(CliError::Compatibility(rep.max_defect));
    }
    let mut budget = solver::select_budget(manifold.sup_bound_gamma, manifold.lipschitz_bound_l)?;
    if let Some(eta) = c.solver.eta {
        budget.eta = eta;
    }
    let opts = SolveOptions {
        tol: c.solver.residual_tol,
        max_iter: c.solver.max_iter,
        delta: c.solver.delta,
        ..SolveOptions::default()
    };
    Ok(Instance { manifold, lattice, data, forcing, budget, opts })
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    let pool = b.build().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    // serde_json maps are ordered by key, so output is sorted
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn reports_json(r: &[EstimateReport]) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

/// Estimate reports that apply to any solution of the run.
fn solution_reports(s: &Solution<f64>) -> Vec<EstimateReport> {
    let l = s.lattice();
    let tol = 4.0 * l.h * estimates::data_mass(&s.data, &s.forcing).max(1.0);
    let mut out = Vec::new();
    if let Ok(r) = estimates::energy_flux_check(s, l.t_of(l.m / 2), tol) {
        out.extend(r);
    }
    if let Ok(r) = estimates::spacetime_null_energy_check(s, tol) {
        out.push(r);
    }
    if s.diagnostics.path.has_single_transport() {
        if let Ok(r) = estimates::q_l1_bound_check(s, (l.m, 0), None, tol) {
            out.push(r);
        }
    }
    out
}

pub fn run_solve(c: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let inst = build_instance(c)?;
    fs::create_dir_all(out)?;
    log::info!("solve: {} base cells, {} layers", inst.lattice.n, inst.lattice.m);
    let s = solver::solve_global(&inst.manifold, &inst.data, &inst.forcing, &inst.budget, &inst.opts)?;
    let mut f = fs::File::create(out.join("solution.csv"))?;
    s.u.write_csv(&mut f)?;
    let defect = s.manifold_defect(&inst.manifold);
    let reports = solution_reports(&s);
    let diag = json!({
        "budget": inst.budget,
        "diagnostics": s.diagnostics,
        "estimates": reports_json(&reports),
        "h": inst.lattice.h,
        "h_norm": s.h_norm(),
        "manifold_defect": defect,
        "manifold_defect_ok": defect <= c.solver.tol_m,
        "path": s.diagnostics.path,
    });
    write_json(&out.join("diagnostics.json"), &diag)?;
    Ok(diag)
}

pub fn run_verify(c: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let inst = build_instance(c)?;
    fs::create_dir_all(out)?;
    log::info!("verify: {} random trials, seed {}", c.verify.trials, c.seed);
    let mut reports = estimates::random_suite(c.seed, c.verify.trials, c.verify.tol);
    let s = solver::solve_global(&inst.manifold, &inst.data, &inst.forcing, &inst.budget, &inst.opts)?;
    reports.extend(solution_reports(&s));
    let mut w = csv::Writer::from_path(out.join("estimates.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["name", "lhs", "rhs", "slack", "tol", "ok"]).map_err(|e| CliError::Io(e.to_string()))?;
    for r in &reports {
        w.write_record([
            r.name.clone(),
            fmt17(r.lhs),
            fmt17(r.rhs),
            fmt17(r.slack),
            fmt17(r.tol),
            r.ok.to_string(),
        ])
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    let failed = reports.iter().filter(|r| !r.ok).count();
    let mut by_name: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &reports {
        let e = by_name.entry(r.name.clone()).or_default();
        e.0 += 1;
        if !r.ok {
            e.1 += 1;
        }
    }
    let summary: BTreeMap<String, Value> =
        by_name.into_iter().map(|(k, (n, f))| (k, json!({"checked": n, "failed": f}))).collect();
    let v = json!({"failed": failed, "seed": c.seed, "summary": summary, "total": reports.len()});
    write_json(&out.join("estimates.json"), &v)?;
    if failed > 0 {
        return Err(CliError::EstimateFailure(failed));
    }
    Ok(v)
}

pub fn run_scatter(c: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let inst = build_instance(c)?;
    let sc = c.scatter.as_ref().ok_or_else(|| CliError::Config("missing [scatter] table".into()))?;
    fs::create_dir_all(out)?;
    let s = solver::solve_global(&inst.manifold, &inst.data, &inst.forcing, &inst.budget, &inst.opts)?;
    let dim = inst.manifold.ambient_dim;
    let spec = c.forcing.clone();
    let f = move |t: f64, x: f64| forcing_value(&spec, dim, t, x);
    let l = inst.lattice;
    let (sd, _) = scattering::scatter_m_valued(
        &inst.manifold,
        &inst.data,
        &f,
        sc.n_compact,
        &inst.budget,
        &inst.opts,
        (l.x_left, l.h, l.n),
    )?;
    let times: Vec<f64> = (0..=l.m.min(l.n - 1)).map(|k| l.t_of(k)).filter(|t| *t >= sc.t_start).collect();
    let series = scattering::defect_series(&s, &sd, &times)?;
    let mut w = csv::Writer::from_path(out.join("defects.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["t", "sup_defect", "l1_ut", "l1_ux"]).map_err(|e| CliError::Io(e.to_string()))?;
    for d in &series {
        w.write_record([fmt17(d.t), fmt17(d.sup_defect), fmt17(d.l1_ut_defect), fmt17(d.l1_ux_defect)])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("scattering_data.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    let mut header = vec!["x".to_string()];
    header.extend((1..=dim).map(|j| format!("ubar_{j}")));
    header.extend((1..=dim).map(|j| format!("vbar_{j}")));
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for i in 0..=sd.data.n_cells() {
        let mut rec = vec![fmt17(sd.data.x_node(i))];
        rec.extend(sd.ubar0(i).iter().map(|v| fmt17(*v)));
        if i < sd.data.n_cells() {
            rec.extend(sd.vbar0(i).iter().map(|v| fmt17(*v)));
        } else {
            rec.extend((0..dim).map(|_| String::new()));
        }
        w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    let cone = scattering::support_cone_check(&s, sc.support, 5.0 * l.h);
    let last = series.last().map(|d| d.max()).unwrap_or(0.0);
    let v = json!({
        "final_defect": last,
        "path": s.diagnostics.path,
        "points": series.len(),
        "support_cone": reports_json(&cone),
    });
    write_json(&out.join("scatter.json"), &v)?;
    Ok(v)
}

/// Per-level sup errors at the nodes of the coarsest lattice, against the
/// closed form when the data have one (geodesic, traveling wave) and
/// against the finest level otherwise; orders are log₂ of successive
/// error ratios scaled by the spacing ratio.
pub fn run_convergence_study(c: &RunConfig, out: &Path) -> Result<Value, CliError> {
    let conv = c.converge.as_ref().ok_or_else(|| CliError::Config("missing [converge] table".into()))?;
    fs::create_dir_all(out)?;
    let mut sols = Vec::new();
    for &h in &conv.levels {
        let mut cc = c.clone();
        cc.domain.h = h;
        cc.converge = None;
        let inst = build_instance(&cc)?;
        let s = solver::solve_global(&inst.manifold, &inst.data, &inst.forcing, &inst.budget, &inst.opts)?;
        sols.push(s);
    }
    let coarse = sols[0].lattice();
    let oracle: Option<Box<dyn Fn(f64, f64) -> Vec<f64>>> = match (&c.data, &c.forcing) {
        (DataConfig::Geodesic { omega }, ForcingConfig::Zero) => {
            let w = *omega;
            Some(Box::new(move |t: f64, _x: f64| vec![(w * t).cos(), (w * t).sin(), 0.0]))
        }
        (DataConfig::TravelingWave { amplitude }, ForcingConfig::Zero) => {
            let a = *amplitude;
            Some(Box::new(move |t: f64, x: f64| {
                let th = a * (x - t).sin();
                vec![th.cos(), th.sin(), 0.0]
            }))
        }
        _ => None,
    };
    let levels = if oracle.is_some() { sols.len() } else { sols.len() - 1 };
    let finest = sols.last().expect("at least three levels");
    let mut errors = Vec::new();
    for s in sols.iter().take(levels) {
        let l = s.lattice();
        let r = lattice_count(coarse.h, l.h).ok_or_else(|| CliError::Config("levels must refine by integers".into()))?;
        let mut e: f64 = 0.0;
        for k in 0..=coarse.m {
            for q in 0..=coarse.n - k {
                let v = s.u.at(k * r, q * r);
                let reference = match &oracle {
                    Some(o) => o(coarse.t_of(k), coarse.x_of(k, q)),
                    None => {
                        let rf = lattice_count(coarse.h, finest.lattice().h)
                            .ok_or_else(|| CliError::Config("levels must refine by integers".into()))?;
                        finest.u.at(k * rf, q * rf).to_vec()
                    }
                };
                for (a, b) in v.iter().zip(&reference) {
                    e = e.max((a - b).abs());
                }
            }
        }
        errors.push(e);
    }
    let mut orders = Vec::new();
    for i in 1..errors.len() {
        let ratio = conv.levels[i - 1] / conv.levels[i];
        orders.push(if errors[i] > 0.0 && errors[i - 1] > 0.0 {
            (errors[i - 1] / errors[i]).ln() / ratio.ln()
        } else {
            f64::NAN
        });
    }
    let mut w = csv::Writer::from_path(out.join("convergence.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["h", "sup_error", "order"]).map_err(|e| CliError::Io(e.to_string()))?;
    for (i, e) in errors.iter().enumerate() {
        let o = if i == 0 { String::new() } else { fmt17(orders[i - 1]) };
        w.write_record([fmt17(conv.levels[i]), fmt17(*e), o]).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    let finite: Vec<f64> = orders.iter().copied().filter(|o| o.is_finite()).collect();
    let v = json!({
        "errors": errors,
        "min_order": finite.iter().copied().fold(None, |m: Option<f64>, o| Some(m.map_or(o, |m| m.min(o)))),
        "orders": finite,
        "reference": if oracle.is_some() { "closed_form" } else { "finest_level" },
    });
    write_json(&out.join("convergence.json"), &v)?;
    Ok(v)
}

/// Runs one subcommand with the given worker count.
pub fn execute(cmd: Command, c: &RunConfig, out: &Path, threads: Option<usize>) -> Result<Value, CliError> {
    with_threads(threads, || match cmd {
        Command::Solve => run_solve(c, out),
        Command::Verify => run_verify(c, out),
        Command::Scatter => run_scatter(c, out),
        Command::Converge => run_convergence_study(c, out),
    })?
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEODESIC: &str = r#"
seed = 1
[domain]
x0 = 0.0
half_length = 1.0
height = 1.0
h = 0.0625
[data]
kind = "geodesic"
omega = 1.0
[solver]
eta = 1.0
"#;

    #[test]
    fn parses_and_validates() {
        let c = RunConfig::from_toml(GEODESIC).unwrap();
        assert_eq!(c.data, DataConfig::Geodesic { omega: 1.0 });
        assert_eq!(c.forcing, ForcingConfig::Zero);
        let bad = GEODESIC.replace("h = 0.0625", "h = 0.3");
        assert!(matches!(RunConfig::from_toml(&bad), Err(CliError::Config(_))));
        let unknown = format!("{GEODESIC}\nbogus = 1\n");
        assert!(RunConfig::from_toml(&unknown).is_err());
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
    }

    #[test]
    fn incompatible_velocity_is_rejected() {
        let s = GEODESIC.replace("kind = \"geodesic\"\nomega = 1.0", "kind = \"constant\"\npoint = [0.0, 0.0, 1.0]");
        let mut c = RunConfig::from_toml(&s).unwrap();
        c.data = DataConfig::Table { file: PathBuf::from("/nonexistent.csv") };
        assert!(matches!(build_instance(&c), Err(CliError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut rows = String::from("x,u1,u2,u3,v1,v2,v3\n");
        for i in 0..=32 {
            rows.push_str(&format!("{},0,0,1,0,0,1\n", -1.0 + i as f64 * 0.0625));
        }
        fs::write(&p, rows).unwrap();
        c.data = DataConfig::Table { file: p };
        let e = build_instance(&c).err().unwrap();
        assert_eq!(e.exit_code(), 3);
    }
}

//! TOML run configuration and its validated, ready-to-run form.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::butcher::{builtin, ButcherTableau};
use crate::error::{Error, Result};
use crate::flux::{catalog_components, catalog_flux, Direction, FluxParams, FluxRef};
use crate::grid::{Grid, PeriodicGrid1D, PeriodicGrid2D, StateField};
use crate::krylov::GmresConfig;
use crate::newton::{Forcing, InitialGuess, JacobianMode, LinearSolver, NewtonConfig};
use crate::problems::{advection_exact, burgers_exact, vortex_exact, EquationKind, SineProfile, VortexParams};
use crate::pseudo_time::{
    consistency_factor, enforce_flux_consistency, newton_pseudo_consistency_factor, PseudoStep, PseudoTimeSchedule,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub problem: ProblemSection,
    pub space: SpaceSection,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub newton: NewtonSection,
    #[serde(default)]
    pub gmres: GmresConfig,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub equation: EquationKind,
    #[serde(default = "one")]
    pub advection_speed: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_mach")]
    pub mach: f64,
    /// Mean and amplitude of the scalar sine profile.
    #[serde(default)]
    pub mean: Option<f64>,
    #[serde(default)]
    pub amplitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub nx: usize,
    /// Defaults to `nx`, which on the default vortex domain gives `Δy = Δx/2`.
    #[serde(default)]
    pub ny: Option<usize>,
    #[serde(default)]
    pub x: Option<[f64; 2]>,
    #[serde(default)]
    pub y: Option<[f64; 2]>,
    pub flux: String,
    #[serde(default = "one")]
    pub lf_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_final_time")]
    pub final_time: f64,
    /// Fixed time step; overrides `dt_over_dx`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_dt_over_dx")]
    pub dt_over_dx: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { method: default_method(), final_time: default_final_time(), dt: None, dt_over_dx: default_dt_over_dx() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Pseudo,
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearKind {
    Direct,
    Gmres,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_solver_kind")]
    pub kind: SolverKind,
    #[serde(default = "default_pseudo_method")]
    pub pseudo_method: String,
    #[serde(default = "default_pseudo_steps")]
    pub pseudo_steps: usize,
    /// Explicit `μ_k`; defaults to `1/√k`, `k = 1, 2, …`.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    /// Newton inner solvers, chained in order.
    #[serde(default = "default_linear")]
    pub linear: Vec<LinearKind>,
    #[serde(default)]
    pub enforce_consistency: bool,
    #[serde(default)]
    pub trace: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            kind: default_solver_kind(),
            pseudo_method: default_pseudo_method(),
            pseudo_steps: default_pseudo_steps(),
            mu: None,
            linear: default_linear(),
            enforce_consistency: false,
            trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForcingKind {
    Fixed,
    EisenstatWalker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSection {
    #[serde(default = "default_newton_iter")]
    pub max_iter: usize,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    #[serde(default)]
    pub rel_tol: f64,
    #[serde(default = "default_forcing")]
    pub forcing: ForcingKind,
    #[serde(default = "point_nine")]
    pub gamma: f64,
    #[serde(default = "point_nine")]
    pub eta_max: f64,
    #[serde(default = "point_nine")]
    pub eta0: f64,
    #[serde(default = "default_jacobian")]
    pub jacobian: JacobianMode,
    #[serde(default = "default_guess")]
    pub guess: InitialGuess,
}

impl Default for NewtonSection {
    fn default() -> Self {
        Self {
            max_iter: default_newton_iter(),
            abs_tol: default_abs_tol(),
            rel_tol: 0.0,
            forcing: default_forcing(),
            gamma: 0.9,
            eta_max: 0.9,
            eta0: 0.9,
            jacobian: default_jacobian(),
            guess: default_guess(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// CSV snapshot of the final state.
    #[serde(default)]
    pub snapshot: Option<PathBuf>,
    /// JSON run artifact for `audit`.
    #[serde(default)]
    pub artifact: Option<PathBuf>,
    /// CSV written by the study subcommands.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Grid sizes `nx` of a convergence study.
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    /// CFL numbers of an acceleration study.
    #[serde(default)]
    pub cfl: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}
fn point_nine() -> f64 {
    0.9
}
fn default_gamma() -> f64 {
    1.4
}
fn default_epsilon() -> f64 {
    5.0
}
fn default_mach() -> f64 {
    0.5
}
fn default_method() -> String {
    "implicit-euler".into()
}
fn default_final_time() -> f64 {
    0.1
}
fn default_dt_over_dx() -> f64 {
    0.25
}
fn default_solver_kind() -> SolverKind {
    SolverKind::Pseudo
}
fn default_pseudo_method() -> String {
    "ssprk3".into()
}
fn default_pseudo_steps() -> usize {
    3
}
fn default_linear() -> Vec<LinearKind> {
    vec![LinearKind::Gmres]
}
fn default_newton_iter() -> usize {
    20
}
fn default_abs_tol() -> f64 {
    1e-10
}
fn default_forcing() -> ForcingKind {
    ForcingKind::Fixed
}
fn default_jacobian() -> JacobianMode {
    JacobianMode::FiniteDifference
}
fn default_guess() -> InitialGuess {
    InitialGuess::Zero
}

impl ProblemSpec {
    /// Parses TOML; errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            let key = match (unknown_field(&msg), missing_field(&msg)) {
                (Some(field), _) if path == "." => field,
                (_, Some(field)) if path == "." => field,
                (_, Some(field)) => format!("{path}.{field}"),
                _ => path,
            };
            Error::config(key, msg)
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Applies a `section.key=value` override, with `value` in TOML syntax.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
        let key = key.trim();
        let parsed: toml::Value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").expect("value present"))
            .or_else(|_| Ok::<_, Error>(toml::Value::String(value.trim().to_string())))?;
        let mut table: toml::Table = toml::Value::try_from(self)
            .ok()
            .and_then(|v| v.as_table().cloned())
            .expect("spec serializes to a table");
        let mut parts = key.split('.').peekable();
        let mut cursor = &mut table;
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                cursor.insert(part.to_string(), parsed.clone());
                break;
            }
            cursor = cursor
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::config(key, "not a section"))?;
        }
        Self::from_toml(&toml::to_string(&table).expect("table serializes"))
    }
}

fn quoted_after(msg: &str, marker: &str) -> Option<String> {
    let rest = msg.split(marker).nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

fn unknown_field(msg: &str) -> Option<String> {
    quoted_after(msg, "unknown field `")
}

fn missing_field(msg: &str) -> Option<String> {
    quoted_after(msg, "missing field `")
}

/// The inner solver of a time step.
#[derive(Clone, Debug)]
pub enum SolverPlan {
    Pseudo(PseudoTimeSchedule<f64>),
    Newton(NewtonConfig<f64>),
}

/// A validated configuration with grid, fluxes and solver built.
#[derive(Clone)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub equation: EquationKind,
    pub grid: Grid<f64>,
    pub components: usize,
    pub fluxes: Vec<FluxRef<f64>>,
    pub tableau: ButcherTableau<f64>,
    pub solver: SolverPlan,
    pub dt: f64,
}

impl Problem {
    pub fn from_spec(spec: &ProblemSpec) -> Result<Self> {
        let p = &spec.problem;
        let eq = p.equation;
        for (key, v) in [("problem.gamma", p.gamma), ("problem.mach", p.mach), ("space.lf_lambda", spec.space.lf_lambda)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(p.gamma > 1.0) {
            return Err(Error::config("problem.gamma", "must exceed 1"));
        }
        let grid = build_grid(spec, eq)?;
        let m = catalog_components(&spec.space.flux).map_err(|e| Error::config("space.flux", e.to_string()))?;
        if m != eq.components() {
            return Err(Error::config(
                "space.flux",
                format!("flux `{}` has {m} components but the equation has {}", spec.space.flux, eq.components()),
            ));
        }
        let params = FluxParams { advection_speed: p.advection_speed, gamma: p.gamma, lf_lambda: spec.space.lf_lambda };
        let fluxes = [Direction::X, Direction::Y][..eq.dims()]
            .iter()
            .map(|&d| catalog_flux(&spec.space.flux, params, d))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::config("space.flux", e.to_string()))?;
        let tableau = builtin(&spec.time.method).map_err(|e| Error::config("time.method", e.to_string()))?;
        let t = &spec.time;
        if !(t.final_time.is_finite() && t.final_time > 0.0) {
            return Err(Error::config("time.final_time", "must be positive"));
        }
        let dt = match t.dt {
            Some(dt) if dt.is_finite() && dt > 0.0 => dt,
            Some(_) => return Err(Error::config("time.dt", "must be positive")),
            None if t.dt_over_dx.is_finite() && t.dt_over_dx > 0.0 => t.dt_over_dx * grid.spacing(0),
            None => return Err(Error::config("time.dt_over_dx", "must be positive")),
        };
        let solver = build_solver(spec)?;
        Ok(Self { spec: spec.clone(), equation: eq, grid, components: m, fluxes, tableau, solver, dt })
    }

    pub fn final_time(&self) -> f64 {
        self.spec.time.final_time
    }

    fn profile(&self) -> SineProfile<f64> {
        let (lo, hi) = self.x_range();
        let (mean, amp) = match self.equation {
            EquationKind::Burgers => (0.5, 0.25),
            _ => (1.0, 0.5),
        };
        SineProfile {
            mean: self.spec.problem.mean.unwrap_or(mean),
            amplitude: self.spec.problem.amplitude.unwrap_or(amp),
            lo,
            hi,
        }
    }

    fn x_range(&self) -> (f64, f64) {
        match &self.grid {
            Grid::OneD(g) => (g.x_min, g.x_max),
            Grid::TwoD(g) => (g.x_min, g.x_max),
        }
    }

    fn vortex_params(&self) -> VortexParams<f64> {
        let p = &self.spec.problem;
        VortexParams { epsilon: p.epsilon, mach: p.mach, gamma: p.gamma }
    }

    pub fn initial_state(&self) -> Result<StateField<f64>> {
        self.exact(0.0, 1.0)
    }

    /// Exact solution at time `t` of the law with flux scaled by `c`,
    /// averaged by the cell-centre value.
    pub fn exact(&self, t: f64, c: f64) -> Result<StateField<f64>> {
        let m = self.components;
        let mut values = Vec::with_capacity(self.grid.n_cells() * m);
        match self.equation {
            EquationKind::Advection => {
                let prof = self.profile();
                let a = self.spec.problem.advection_speed;
                for cell in 0..self.grid.n_cells() {
                    values.push(advection_exact(&prof, a, self.grid.center(cell)[0], t, c));
                }
            }
            EquationKind::Burgers => {
                let prof = self.profile();
                for cell in 0..self.grid.n_cells() {
                    values.push(burgers_exact(&prof, self.grid.center(cell)[0], t, c)?);
                }
            }
            EquationKind::Euler2d => {
                let range = self.x_range();
                let params = self.vortex_params();
                for cell in 0..self.grid.n_cells() {
                    let x = self.grid.center(cell);
                    values.extend(vortex_exact(x[0], x[1], t, c, range, params));
                }
            }
        }
        StateField::from_values(self.grid, m, values)
    }

    /// The factor `c` the solver's effective flux is consistent with, when a
    /// closed form exists (pseudo-time, and Newton with fixed iteration count
    /// and a pseudo-time inner solver).
    pub fn consistency_factor(&self) -> Option<f64> {
        match &self.solver {
            SolverPlan::Pseudo(s) => Some(consistency_factor(s)),
            SolverPlan::Newton(cfg) => match &cfg.linear {
                LinearSolver::PseudoTime(s) if cfg.abs_tol == 0.0 && cfg.rel_tol == 0.0 => {
                    Some(newton_pseudo_consistency_factor(s, cfg.max_iter))
                }
                LinearSolver::Direct => Some(1.0),
                _ => None,
            },
        }
    }

    /// Short human-readable description of the scheme.
    pub fn describe(&self) -> String {
        let solver = match &self.solver {
            SolverPlan::Pseudo(s) => format!("pseudo-time {} steps", s.len()),
            SolverPlan::Newton(cfg) => format!("newton(max_iter={}) + {}", cfg.max_iter, cfg.linear.describe()),
        };
        format!("{} / {} / {} / {}", eq_name(self.equation), self.spec.space.flux, self.tableau.name(), solver)
    }
}

fn eq_name(e: EquationKind) -> &'static str {
    match e {
        EquationKind::Advection => "advection",
        EquationKind::Burgers => "burgers",
        EquationKind::Euler2d => "euler2d",
    }
}

fn build_grid(spec: &ProblemSpec, eq: EquationKind) -> Result<Grid<f64>> {
    let s = &spec.space;
    let bad = |e: Error| Error::config("space.nx", e.to_string());
    match eq.dims() {
        1 => {
            if s.ny.is_some() || s.y.is_some() {
                return Err(Error::config("space.ny", "not used by 1D equations"));
            }
            let x = s.x.unwrap_or([0.0, 1.0]);
            Ok(PeriodicGrid1D::new(s.nx, x[0], x[1]).map_err(bad)?.into())
        }
        _ => {
            let x = s.x.unwrap_or([-5.0, 15.0]);
            let y = s.y.unwrap_or([-5.0, 5.0]);
            let ny = s.ny.unwrap_or(s.nx);
            Ok(PeriodicGrid2D::new(s.nx, ny, (x[0], x[1]), (y[0], y[1])).map_err(bad)?.into())
        }
    }
}

fn build_schedule(sec: &SolverSection) -> Result<PseudoTimeSchedule<f64>> {
    let tab = Arc::new(builtin(&sec.pseudo_method).map_err(|e| Error::config("solver.pseudo_method", e.to_string()))?);
    if !tab.is_explicit() {
        return Err(Error::config("solver.pseudo_method", "pseudo-time steps need an explicit method"));
    }
    let mu = match &sec.mu {
        Some(mu) => mu.clone(),
        None => (1..=sec.pseudo_steps).map(|i| 1.0 / (i as f64).sqrt()).collect(),
    };
    if mu.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
        return Err(Error::config("solver.mu", "entries must be positive"));
    }
    let schedule = PseudoTimeSchedule::new(mu.into_iter().map(|mu| PseudoStep { tableau: tab.clone(), mu }).collect())
        .map_err(|e| Error::config("solver.mu", e.to_string()))?;
    Ok(if sec.enforce_consistency { enforce_flux_consistency(&schedule) } else { schedule })
}

fn build_solver(spec: &ProblemSpec) -> Result<SolverPlan> {
    let sec = &spec.solver;
    match sec.kind {
        SolverKind::Pseudo => Ok(SolverPlan::Pseudo(build_schedule(sec)?)),
        SolverKind::Newton => {
            spec.gmres.validate()?;
            if sec.linear.is_empty() {
                return Err(Error::config("solver.linear", "needs at least one inner solver"));
            }
            let mut parts = Vec::new();
            for kind in &sec.linear {
                parts.push(match kind {
                    LinearKind::Direct => LinearSolver::Direct,
                    LinearKind::Gmres => LinearSolver::Gmres(spec.gmres.clone()),
                    LinearKind::Pseudo => LinearSolver::PseudoTime(build_schedule(sec)?),
                });
            }
            let linear = if parts.len() == 1 { parts.pop().expect("one solver") } else { LinearSolver::Sequence(parts) };
            let n = &spec.newton;
            let forcing = match n.forcing {
                ForcingKind::Fixed => Forcing::Fixed,
                ForcingKind::EisenstatWalker => Forcing::EisenstatWalker { gamma: n.gamma, eta_max: n.eta_max, eta0: n.eta0 },
            };
            // for GMRES the consistent start is the explicit Euler guess
            let guess = if sec.enforce_consistency && sec.linear.contains(&LinearKind::Gmres) {
                InitialGuess::ExplicitEuler
            } else {
                n.guess
            };
            let cfg = NewtonConfig {
                max_iter: n.max_iter,
                abs_tol: n.abs_tol,
                rel_tol: n.rel_tol,
                linear,
                forcing,
                jacobian: n.jacobian,
                guess,
                final_residual: false,
            };
            cfg.validate()?;
            Ok(SolverPlan::Newton(cfg))
        }
    }
}

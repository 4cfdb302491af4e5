//! Time stepping driven by a [`Problem`], and the grid-refinement,
//! acceleration and Krylov/ERK equivalence studies with their CSV output.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::audit::{contract_stage_fluxes, mass_drift, reconstruct_h_flux, GridSpec, RunArtifact, StepArtifact};
use crate::config::{Problem, ProblemSpec, SolverPlan};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::flux::euler_max_wave_speed;
use crate::grid::{Grid, StateField};
use crate::krylov::verify_krylov_erk_equivalence;
use crate::newton::{newton_interface_flux, newton_solve, InitialGuess, LinearSolver, NewtonConfig, NewtonTrace};
use crate::problems::EquationKind;
use crate::pseudo_time::{irk_step_extract_for, iterate};
use crate::residual::{ConservativeResidual, FaceFluxes, ImplicitEulerResidual, IrkStageResidual};

/// Environment variable capping the number of concurrent level solves.
pub const THREADS_ENV: &str = "CONS_ITER_THREADS";

/// One physical time step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub u_np1: Vec<f64>,
    pub evaluations: usize,
    /// Effective interface fluxes of the step, when traced and available.
    pub h: Option<FaceFluxes<f64>>,
    pub newton: Option<NewtonTrace<f64>>,
}

fn residual_for(problem: &Problem, u_n: &StateField<f64>, dt: f64) -> Result<Box<dyn ConservativeResidual<f64>>> {
    Ok(if problem.tableau.name() == "implicit-euler" {
        Box::new(ImplicitEulerResidual::new(u_n, dt, problem.fluxes.clone())?)
    } else {
        Box::new(IrkStageResidual::new(&problem.tableau, u_n, dt, problem.fluxes.clone())?)
    })
}

/// Advances `u_n` by `dt`: builds the implicit Euler or stacked IRK
/// residual, runs the configured solver from `u_n`, and extracts the step.
pub fn run_step(problem: &Problem, u_n: &StateField<f64>, dt: f64) -> Result<StepOutcome> {
    let m = problem.components;
    let stacked = problem.tableau.name() != "implicit-euler";
    if stacked {
        // fail before any work when the step cannot be extracted
        problem.tableau.find_v(crate::butcher::V_VECTOR_TOL).ok_or_else(|| Error::NoVVector(problem.tableau.name().into()))?;
    }
    let residual = residual_for(problem, u_n, dt)?;
    let trace = problem.spec.solver.trace;
    let (v, h, newton) = match &problem.solver {
        SolverPlan::Pseudo(schedule) => {
            let (v, tr) = iterate(schedule, residual.as_ref(), residual.base(), trace)?;
            let h = if trace { Some(reconstruct_h_flux(&problem.grid, residual.block_size(), &tr, schedule)?) } else { None };
            (v, h, None)
        }
        SolverPlan::Newton(cfg) => {
            let (v, tr) = newton_solve(residual.as_ref(), residual.base(), cfg)?;
            let h = if trace && !stacked && matches!(cfg.linear, LinearSolver::Direct) && tr.iterates.len() > 1 {
                Some(last_newton_flux(problem, &tr)?)
            } else {
                None
            };
            (v, h, Some(tr))
        }
    };
    let (u_np1, h) = if stacked {
        let u = irk_step_extract_for(&problem.tableau, &v, m)?;
        let h = h.map(|h| contract_stage_fluxes(&problem.tableau, &h, m)).transpose()?;
        (u, h)
    } else {
        (v, h)
    };
    if u_np1.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonphysicalState { cell: 0, reason: "time step produced a nonfinite value".into() });
    }
    Ok(StepOutcome { u_np1, evaluations: residual.evaluations(), h, newton })
}

/// Newton flux of the last iteration, which the step is conservative with
/// when that iteration's linear system was solved exactly.
fn last_newton_flux(problem: &Problem, tr: &NewtonTrace<f64>) -> Result<FaceFluxes<f64>> {
    let k = tr.iterates.len() - 2;
    let (v, next) = (&tr.iterates[k], &tr.iterates[k + 1]);
    let dv: Vec<f64> = next.iter().zip(v).map(|(a, b)| a - b).collect();
    let dirs = problem
        .fluxes
        .iter()
        .enumerate()
        .map(|(d, f)| newton_interface_flux(&problem.grid, d, f, v, &dv))
        .collect::<Result<Vec<_>>>()?;
    Ok(FaceFluxes { block: problem.components, dirs })
}

/// Step sizes reaching `final_time`: `ceil(T/Δt)` steps, the last one
/// shortened to land on `T`.
pub fn step_sizes(final_time: f64, dt: f64) -> Vec<f64> {
    let n = ((final_time / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut sizes = vec![dt; n];
    sizes[n - 1] = final_time - dt * (n - 1) as f64;
    sizes
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub initial: StateField<f64>,
    pub state: StateField<f64>,
    pub evaluations: usize,
    pub steps: usize,
    /// Largest per-component relative mass drift over the run.
    pub mass_drift: Vec<f64>,
    pub artifact: Option<RunArtifact>,
}

/// Runs `problem` from its initial state to its final time.
pub fn simulate(problem: &Problem, record: bool) -> Result<Simulation> {
    let initial = problem.initial_state()?;
    let mut u = initial.clone();
    let mut evaluations = 0;
    let mut steps = Vec::new();
    let sizes = step_sizes(problem.final_time(), problem.dt);
    for &dt in &sizes {
        let out = run_step(problem, &u, dt)?;
        evaluations += out.evaluations;
        let next = StateField::from_values(problem.grid, problem.components, out.u_np1)?;
        if record {
            steps.push(StepArtifact {
                dt,
                u_n: u.values().to_vec(),
                u_np1: next.values().to_vec(),
                h: out.h.map(|h| h.dirs),
            });
        }
        u = next;
    }
    let drift = mass_drift(&problem.grid, problem.components, initial.values(), u.values());
    let artifact = record.then(|| RunArtifact {
        method: problem.describe(),
        grid: GridSpec::of(&problem.grid),
        components: problem.components,
        steps,
        effective_c: None,
    });
    Ok(Simulation { initial, state: u, evaluations, steps: sizes.len(), mass_drift: drift, artifact })
}

/// Discrete L2 distance of one component, weighted by the cell volume.
pub fn l2_distance(a: &StateField<f64>, b: &StateField<f64>, component: usize) -> f64 {
    let m = a.components();
    let sq: f64 = a
        .values()
        .chunks_exact(m)
        .zip(b.values().chunks_exact(m))
        .map(|(x, y)| (x[component] - y[component]).powi(2))
        .sum();
    (sq * a.grid().cell_volume()).sqrt()
}

/// One grid level of a refinement study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub dx: f64,
    pub err_original: f64,
    pub err_modified: f64,
    pub c: f64,
    pub evals: usize,
}

pub const CONVERGENCE_HEADER: &str = "dx,err_original,err_modified,c,evals";

fn with_nx(spec: &ProblemSpec, nx: usize) -> ProblemSpec {
    let mut s = spec.clone();
    if let Some(ny) = spec.space.ny {
        s.space.ny = Some(((ny as f64) * nx as f64 / spec.space.nx as f64).round().max(3.0) as usize);
    }
    s.space.nx = nx;
    s
}

/// Runs a thread pool of at most `CONS_ITER_THREADS` workers.
fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::config(THREADS_ENV, "must be a positive integer"))?;
        if n == 0 {
            return Err(Error::config(THREADS_ENV, "must be a positive integer"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Unsupported(e.to_string()))
}

/// Runs `spec` at each `nx` in `levels` with `Δt = dt_over_dx·Δx` and the
/// same `μ_k` on every level, and measures the first-component L2 error
/// against the exact solution of the original law and of the law with flux
/// scaled by `c`. Rows are ordered by decreasing `Δx`.
pub fn convergence_study(spec: &ProblemSpec, levels: &[usize]) -> Result<Vec<ConvergenceRow>> {
    if levels.len() < 2 {
        return Err(Error::config("output.levels", "need at least two grid levels"));
    }
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let mut base = spec.clone();
    base.time.dt = None;
    let problems = levels.iter().map(|&nx| Problem::from_spec(&with_nx(&base, nx))).collect::<Result<Vec<_>>>()?;
    let rows = pool()?.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let sim = simulate(p, false)?;
                let c = p.consistency_factor().unwrap_or(1.0);
                let t = p.final_time();
                Ok(ConvergenceRow {
                    dx: p.grid.spacing(0),
                    err_original: l2_distance(&sim.state, &p.exact(t, 1.0)?, 0),
                    err_modified: l2_distance(&sim.state, &p.exact(t, c)?, 0),
                    c,
                    evals: sim.evaluations,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows)
}

pub fn write_convergence_csv(rows: &[ConvergenceRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{CONVERGENCE_HEADER}")?;
    for r in rows {
        writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e},{}", r.dx, r.err_original, r.err_modified, r.c, r.evals)?;
    }
    Ok(())
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Residual history of one Newton solve.
#[derive(Clone, Debug, Serialize)]
pub struct NewtonHistory {
    pub residual_norms: Vec<f64>,
    pub cumulative_evaluations: Vec<usize>,
    pub guess_evaluations: Vec<usize>,
    pub converged: bool,
}

impl NewtonHistory {
    fn from_trace(t: &NewtonTrace<f64>) -> Self {
        Self {
            residual_norms: t.residual_norms.clone(),
            cumulative_evaluations: t.cumulative_evaluations.clone(),
            guess_evaluations: t.linear.iter().map(|l| l.guess_evaluations).collect(),
            converged: t.converged,
        }
    }

    /// Evaluations spent when the residual first dropped to `level`.
    pub fn evaluations_to_reach(&self, level: f64) -> Option<usize> {
        self.residual_norms.iter().position(|&r| r <= level).map(|i| self.cumulative_evaluations[i])
    }

    pub fn total_evaluations(&self) -> usize {
        self.cumulative_evaluations.last().copied().unwrap_or(0)
    }
}

/// Both initial-guess policies on one grid.
#[derive(Clone, Debug, Serialize)]
pub struct AccelerationRun {
    pub cfl: f64,
    pub nx: usize,
    pub dt: f64,
    pub standard: NewtonHistory,
    pub consistent: NewtonHistory,
}

pub const ACCELERATION_HEADER: &str = "residual,evals_standard,evals_consistent,cfl";

fn max_wave_speed(problem: &Problem, u: &StateField<f64>) -> Result<f64> {
    let m = problem.components;
    let mut s: f64 = 0.0;
    for cell in u.values().chunks_exact(m) {
        s = s.max(match problem.equation {
            EquationKind::Advection => problem.spec.problem.advection_speed.abs(),
            EquationKind::Burgers => cell[0].abs(),
            EquationKind::Euler2d => euler_max_wave_speed(cell, problem.spec.problem.gamma)?,
        });
    }
    Ok(s)
}

/// One implicit Euler step of size `time.dt` (default 0.1) with Newton-GMRES
/// and Eisenstat-Walker forcing, once from the zero GMRES guess and once from
/// `−Δt g(v)`, on grids sized so that `λ_max Δt/Δx` matches each CFL number.
pub fn acceleration_study(spec: &ProblemSpec, cfls: &[f64]) -> Result<Vec<AccelerationRun>> {
    if cfls.is_empty() {
        return Err(Error::config("output.cfl", "need at least one CFL number"));
    }
    let mut base = spec.clone();
    base.time.method = "implicit-euler".into();
    let dt = base.time.dt.unwrap_or(0.1);
    base.time.dt = Some(dt);
    base.time.final_time = dt;
    base.solver.enforce_consistency = false;
    let probe = Problem::from_spec(&base)?;
    if !matches!(&probe.solver, SolverPlan::Newton(cfg) if matches!(cfg.linear, LinearSolver::Gmres(_))) {
        return Err(Error::config("solver.linear", "the acceleration study needs Newton with GMRES"));
    }
    let lambda = max_wave_speed(&probe, &probe.initial_state()?)?;
    let length = match &probe.grid {
        Grid::OneD(g) => g.x_max - g.x_min,
        Grid::TwoD(g) => g.x_max - g.x_min,
    };
    let mut runs = Vec::new();
    for (i, &cfl) in cfls.iter().enumerate() {
        if !(cfl.is_finite() && cfl > 0.0) {
            return Err(Error::config(format!("output.cfl[{i}]"), "must be positive"));
        }
        let nx = ((cfl * length / (lambda * dt)).round() as usize).max(3);
        let problem = Problem::from_spec(&with_nx(&base, nx))?;
        let SolverPlan::Newton(cfg) = &problem.solver else { unreachable!("checked above") };
        let u0 = problem.initial_state()?;
        let history = |guess: InitialGuess| -> Result<NewtonHistory> {
            let residual = residual_for(&problem, &u0, dt)?;
            let cfg = NewtonConfig { guess, final_residual: true, ..cfg.clone() };
            let (_, tr) = newton_solve(residual.as_ref(), residual.base(), &cfg)?;
            Ok(NewtonHistory::from_trace(&tr))
        };
        runs.push(AccelerationRun {
            cfl: lambda * dt / problem.grid.spacing(0),
            nx,
            dt,
            standard: history(InitialGuess::Zero)?,
            consistent: history(InitialGuess::ExplicitEuler)?,
        });
    }
    Ok(runs)
}

/// Residual levels `10^0, 10^-1, …` down to the smallest residual reached.
pub fn residual_levels(runs: &[AccelerationRun]) -> Vec<f64> {
    let floor = runs
        .iter()
        .flat_map(|r| r.standard.residual_norms.iter().chain(&r.consistent.residual_norms))
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let top = runs
        .iter()
        .flat_map(|r| r.standard.residual_norms.first().into_iter().chain(r.consistent.residual_norms.first()))
        .fold(0.0f64, |a, &b| a.max(b));
    let mut e = top.log10().ceil() as i32;
    let mut levels = Vec::new();
    while 10f64.powi(e) >= floor && levels.len() < 40 {
        levels.push(10f64.powi(e));
        e -= 1;
    }
    levels
}

pub fn write_acceleration_csv(runs: &[AccelerationRun], mut w: impl Write) -> Result<()> {
    writeln!(w, "{ACCELERATION_HEADER}")?;
    let levels = residual_levels(runs);
    let field = |n: Option<usize>| n.map(|v| v.to_string()).unwrap_or_default();
    for run in runs {
        for &level in &levels {
            writeln!(
                w,
                "{:.16e},{},{},{:.16e}",
                level,
                field(run.standard.evaluations_to_reach(level)),
                field(run.consistent.evaluations_to_reach(level)),
                run.cfl
            )?;
        }
    }
    Ok(())
}

/// One random Krylov/ERK equivalence check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub n: usize,
    pub k: usize,
    pub a: f64,
    pub difference: f64,
}

pub const EQUIVALENCE_HEADER: &str = "n,k,a,difference";

/// `cases` random diagonally shifted systems with `n ≤ max_n`, `k ≤ 5`,
/// `a ∈ {0.5, 1, 2}` and random initial guesses, from a fixed seed.
pub fn krylov_equivalence_study(cases: usize, max_n: usize, seed: u64) -> Result<Vec<EquivalenceRow>> {
    if max_n < 2 {
        return Err(Error::config("max_n", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cases);
    for _ in 0..cases {
        let n = rng.gen_range(2..=max_n);
        let k = rng.gen_range(0..=5usize.min(n - 1));
        let a = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
        let shift = 2.0 + (n as f64).sqrt();
        let m = DenseMatrix::from_fn(n, n, |i, j| rng.gen_range(-1.0..1.0) + if i == j { shift } else { 0.0 });
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let difference = verify_krylov_erk_equivalence(&m, &d, &w0, k, a)?;
        rows.push(EquivalenceRow { n, k, a, difference });
    }
    Ok(rows)
}

pub fn write_equivalence_csv(rows: &[EquivalenceRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{EQUIVALENCE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.16e}", r.n, r.k, r.a, r.difference)?;
    }
    Ok(())
}

//! Newton's method on conservative residuals with direct, GMRES, pseudo-time
//! or chained inner solvers, Eisenstat-Walker forcing, and the interface flux
//! a Newton update is conservative with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::FluxRef;
use crate::grid::{weighted_norm, Grid};
use crate::krylov::{gmres, GmresConfig, LinearOperator};
use crate::pseudo_time::{iterate_linear, PseudoTimeSchedule};
use crate::residual::{
    analytic_jacobian, fd_assembled_jacobian, BlockStencilJacobian, ConservativeResidual, FdJacobian, SplitDerivative,
};
use crate::scalar::Real;

/// Inner solver for the Newton system `g'(v) Δv = −g(v)`.
#[derive(Clone, Debug)]
pub enum LinearSolver<T> {
    Direct,
    Gmres(GmresConfig),
    PseudoTime(PseudoTimeSchedule<T>),
    /// Runs each solver in turn, every one continuing from the previous
    /// solver's approximation.
    Sequence(Vec<LinearSolver<T>>),
}

impl<T: Real> LinearSolver<T> {
    pub fn describe(&self) -> String {
        match self {
            LinearSolver::Direct => "direct".into(),
            LinearSolver::Gmres(c) => format!("gmres(restart={}, max_iter={})", c.restart, c.max_iter),
            LinearSolver::PseudoTime(s) => format!("pseudo({} steps)", s.len()),
            LinearSolver::Sequence(list) => {
                format!("sequence[{}]", list.iter().map(|s| s.describe()).collect::<Vec<_>>().join(", "))
            }
        }
    }
}

/// How the relative tolerance of GMRES is chosen per Newton iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Forcing {
    /// Use the GMRES configuration's own tolerance.
    Fixed,
    EisenstatWalker { gamma: f64, eta_max: f64, eta0: f64 },
}

impl Forcing {
    pub fn eisenstat_walker_default() -> Self {
        Forcing::EisenstatWalker { gamma: 0.9, eta_max: 0.9, eta0: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

/// Initial guess of the inner linear solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    Zero,
    /// `Δw0 = −Δt g(v)`, one explicit Euler pseudo step with `μ = 1`.
    ExplicitEuler,
}

#[derive(Clone, Debug)]
pub struct NewtonConfig<T> {
    pub max_iter: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub linear: LinearSolver<T>,
    pub forcing: Forcing,
    pub jacobian: JacobianMode,
    pub guess: InitialGuess,
    /// Evaluate `g` once more after the last update (for reporting).
    pub final_residual: bool,
}

impl<T: Real> Default for NewtonConfig<T> {
    fn default() -> Self {
        Self {
            max_iter: 20,
            abs_tol: 1e-12,
            rel_tol: 0.0,
            linear: LinearSolver::Direct,
            forcing: Forcing::Fixed,
            jacobian: JacobianMode::FiniteDifference,
            guess: InitialGuess::Zero,
            final_residual: true,
        }
    }
}

impl<T: Real> NewtonConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol >= 0.0) {
            return Err(Error::config("newton.abs_tol", "must be nonnegative"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::config("newton.rel_tol", "must be nonnegative"));
        }
        if let Forcing::EisenstatWalker { gamma, eta_max, eta0 } = self.forcing {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(Error::config("newton.gamma", "must lie in (0, 1]"));
            }
            if !(eta_max > 0.0 && eta_max < 1.0) {
                return Err(Error::config("newton.eta_max", "must lie in (0, 1)"));
            }
            if !(eta0 > 0.0 && eta0 < 1.0) {
                return Err(Error::config("newton.eta0", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Kelley's safeguarded Choice 2: `η = min(η_max, γ (‖g_k‖/‖g_{k−1}‖)²)`,
/// raised to `γ η_{k−1}²` when that exceeds 0.1.
pub fn eisenstat_walker_eta(prev_eta: f64, norm_k: f64, norm_prev: f64, gamma: f64, eta_max: f64) -> f64 {
    let ratio = norm_k / norm_prev;
    let mut eta = gamma * ratio * ratio;
    let safeguard = gamma * prev_eta * prev_eta;
    if safeguard > 0.1 {
        eta = eta.max(safeguard);
    }
    eta.min(eta_max)
}

/// What one inner solve did.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LinearSolveRecord {
    pub solver: String,
    pub eta: Option<f64>,
    pub iterations: usize,
    pub matvecs: usize,
    /// Space-discretization evaluations spent inside the solve.
    pub evaluations: usize,
    /// Evaluations spent forming the initial guess.
    pub guess_evaluations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Default)]
pub struct NewtonTrace<T> {
    /// `v^(0), …, v^(K)`.
    pub iterates: Vec<Vec<T>>,
    /// `‖g(v^(k))‖` in the grid-weighted L2 norm, for each evaluated iterate.
    pub residual_norms: Vec<T>,
    /// Cumulative evaluations at the moment each residual norm was known.
    pub cumulative_evaluations: Vec<usize>,
    pub linear: Vec<LinearSolveRecord>,
    pub converged: bool,
    pub evaluations: usize,
}

impl<T> NewtonTrace<T> {
    pub fn newton_iterations(&self) -> usize {
        self.linear.len()
    }
}

/// Newton's method for `g(v) = 0` from `v0`.
pub fn newton_solve<T: Real>(
    residual: &dyn ConservativeResidual<T>,
    v0: &[T],
    cfg: &NewtonConfig<T>,
) -> Result<(Vec<T>, NewtonTrace<T>)> {
    cfg.validate()?;
    let start = residual.evaluations();
    let grid = *residual.grid();
    let mut trace = NewtonTrace { iterates: vec![v0.to_vec()], ..Default::default() };
    let mut v = v0.to_vec();
    let mut g0_norm = None;
    let mut prev_eta = match cfg.forcing {
        Forcing::EisenstatWalker { eta0, .. } => eta0,
        Forcing::Fixed => 0.0,
    };
    for k in 0..cfg.max_iter {
        let (g, faces) = residual.evaluate_with_faces(&v)?;
        let norm = weighted_norm(&grid, &g);
        if !norm.is_finite() {
            return Err(Error::LinearSolveFailed(format!("nonfinite residual at Newton iteration {k}")));
        }
        trace.residual_norms.push(norm);
        trace.cumulative_evaluations.push(residual.evaluations() - start);
        let g0 = *g0_norm.get_or_insert(norm);
        if norm.as_f64() <= cfg.abs_tol + cfg.rel_tol * g0.as_f64() {
            trace.converged = true;
            trace.evaluations = residual.evaluations() - start;
            return Ok((v, trace));
        }
        let eta = match cfg.forcing {
            Forcing::Fixed => None,
            Forcing::EisenstatWalker { gamma, eta_max, .. } => {
                if k > 0 {
                    let prev = trace.residual_norms[k - 1].as_f64();
                    prev_eta = eisenstat_walker_eta(prev_eta, norm.as_f64(), prev, gamma, eta_max);
                }
                Some(prev_eta)
            }
        };
        let rhs: Vec<T> = g.iter().map(|&x| -x).collect();
        let guess = match cfg.guess {
            InitialGuess::Zero => vec![T::zero(); v.len()],
            InitialGuess::ExplicitEuler => g.iter().map(|&x| -residual.dt() * x).collect(),
        };
        let before = residual.evaluations();
        let mut record = LinearSolveRecord { solver: cfg.linear.describe(), eta, ..Default::default() };
        let dv = {
            let system = NewtonSystem { residual, v: &v, faces, mode: cfg.jacobian };
            solve_linear(&system, &cfg.linear, &rhs, guess, eta, &mut record)?
        };
        record.evaluations = residual.evaluations() - before;
        trace.linear.push(record);
        for (x, d) in v.iter_mut().zip(&dv) {
            *x += *d;
        }
        trace.iterates.push(v.clone());
    }
    if cfg.final_residual {
        let g = residual.evaluate(&v)?;
        let norm = weighted_norm(&grid, &g);
        trace.residual_norms.push(norm);
        trace.cumulative_evaluations.push(residual.evaluations() - start);
        let g0 = g0_norm.unwrap_or(norm);
        trace.converged = norm.as_f64() <= cfg.abs_tol + cfg.rel_tol * g0.as_f64();
    }
    trace.evaluations = residual.evaluations() - start;
    Ok((v, trace))
}

struct NewtonSystem<'a, T: Real> {
    residual: &'a dyn ConservativeResidual<T>,
    v: &'a [T],
    faces: crate::residual::FaceFluxes<T>,
    mode: JacobianMode,
}

impl<'a, T: Real> NewtonSystem<'a, T> {
    fn assembled(&self) -> Result<BlockStencilJacobian<T>> {
        match self.mode {
            JacobianMode::Analytic => analytic_jacobian(self.residual, self.v),
            JacobianMode::FiniteDifference => fd_assembled_jacobian(self.residual, self.v),
        }
    }

    fn operator(&self) -> Result<Box<dyn LinearOperator<T> + '_>> {
        Ok(match self.mode {
            JacobianMode::Analytic => Box::new(analytic_jacobian(self.residual, self.v)?),
            JacobianMode::FiniteDifference => {
                Box::new(FdJacobian::with_faces(self.residual, self.v.to_vec(), self.faces.clone()))
            }
        })
    }
}

fn solve_linear<T: Real>(
    system: &NewtonSystem<'_, T>,
    solver: &LinearSolver<T>,
    rhs: &[T],
    guess: Vec<T>,
    eta: Option<f64>,
    record: &mut LinearSolveRecord,
) -> Result<Vec<T>> {
    match solver {
        LinearSolver::Direct => {
            let jac = system.assembled()?;
            let dv = jac.solve(rhs)?;
            record.converged = true;
            Ok(dv)
        }
        LinearSolver::Gmres(base) => {
            let op = system.operator()?;
            let mut cfg = base.clone();
            if let Some(eta) = eta {
                cfg.tol = eta;
            }
            let (dv, tr) = gmres(op.as_ref(), rhs, &guess, &cfg)?;
            record.iterations += tr.iterations;
            record.matvecs += tr.matvecs;
            record.converged = tr.converged;
            Ok(dv)
        }
        LinearSolver::PseudoTime(schedule) => {
            let op = system.operator()?;
            let dv = iterate_linear(schedule, op.as_ref(), rhs, &guess, system.residual.dt())?;
            record.iterations += schedule.len();
            record.matvecs += schedule.steps().iter().map(|s| s.tableau.stages()).sum::<usize>();
            Ok(dv)
        }
        LinearSolver::Sequence(list) => {
            let mut x = guess;
            for s in list {
                x = solve_linear(system, s, rhs, x, eta, record)?;
            }
            Ok(x)
        }
    }
}

/// Interface flux of a Newton update along one direction:
/// `h = f̂(v_c, v_r) + f̂_θ(v_c, v_r) Δv_c + f̂_φ(v_c, v_r) Δv_r`, with the
/// derivatives assembled from the symmetric and antisymmetric parts.
/// `h[c]` is the flux through the high-side face of cell `c`.
pub fn newton_interface_flux<T: Real>(grid: &Grid<T>, dir: usize, flux: &FluxRef<T>, v: &[T], dv: &[T]) -> Result<Vec<T>> {
    let m = flux.components();
    let sd = SplitDerivative::new(flux);
    let mut h = vec![T::zero(); grid.n_cells() * m];
    let (mut dl, mut dr) = (vec![T::zero(); m * m], vec![T::zero(); m * m]);
    for c in 0..grid.n_cells() {
        let r = grid.neighbor(c, dir, true);
        let (vc, vr) = (&v[c * m..(c + 1) * m], &v[r * m..(r + 1) * m]);
        let out = &mut h[c * m..(c + 1) * m];
        flux.evaluate(vc, vr, out).map_err(|e| e.at_cell(c))?;
        sd.blocks(vc, vr, &mut dl, &mut dr).map_err(|e| e.at_cell(c))?;
        for l in 0..m {
            for k in 0..m {
                out[l] += dl[l * m + k] * dv[c * m + k] + dr[l * m + k] * dv[r * m + k];
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{AdvectionCentral, BurgersCentral, BurgersLaxFriedrichs};
    use crate::grid::{PeriodicGrid1D, StateField};
    use crate::residual::ImplicitEulerResidual;
    use std::sync::Arc;

    #[test]
    fn eisenstat_walker_examples() {
        assert!((eisenstat_walker_eta(0.01, 1.0, 1.0, 0.9, 0.9) - 0.9).abs() < 1e-15);
        assert!((eisenstat_walker_eta(0.01, 0.1, 1.0, 0.9, 0.9) - 0.009).abs() < 1e-15);
        assert!((eisenstat_walker_eta(0.9, 0.5, 1.0, 0.9, 0.9) - 0.729).abs() < 1e-15);
    }

    fn advection_residual(n: usize, dt: f64) -> ImplicitEulerResidual<f64> {
        let g = PeriodicGrid1D::new(n, 0.0, 1.0).unwrap().into();
        let un = StateField::from_fn(g, 1, |x| vec![1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).sin()]);
        ImplicitEulerResidual::new(&un, dt, vec![Arc::new(AdvectionCentral { a: 1.0 })]).unwrap()
    }

    #[test]
    fn linear_problem_converges_in_one_direct_step() {
        let r = advection_residual(32, 0.05);
        let cfg = NewtonConfig { jacobian: JacobianMode::Analytic, abs_tol: 1e-10, ..Default::default() };
        let (_, trace) = newton_solve(&r, r.base(), &cfg).unwrap();
        assert_eq!(trace.newton_iterations(), 1);
        assert!(trace.converged);
    }

    #[test]
    fn root_at_start_takes_no_step() {
        let g = PeriodicGrid1D::new(10, 0.0, 1.0).unwrap().into();
        let un = StateField::from_fn(g, 1, |_| vec![0.4]);
        let r = ImplicitEulerResidual::new(&un, 0.1, vec![Arc::new(BurgersCentral)]).unwrap();
        let (v, trace) = newton_solve(&r, un.values(), &NewtonConfig::default()).unwrap();
        assert_eq!(trace.newton_iterations(), 0);
        assert_eq!(v, un.values());
        assert_eq!(trace.evaluations, 1);
    }

    #[test]
    fn burgers_newton_converges_quadratically() {
        let g = PeriodicGrid1D::new(30, 0.0, 1.0).unwrap().into();
        let un = StateField::from_fn(g, 1, |x| vec![0.6 + 0.4 * (2.0 * std::f64::consts::PI * x[0]).sin()]);
        let r = ImplicitEulerResidual::new(&un, 0.05, vec![Arc::new(BurgersLaxFriedrichs { lambda: 1.0 })]).unwrap();
        let cfg = NewtonConfig { max_iter: 4, abs_tol: 0.0, jacobian: JacobianMode::Analytic, ..Default::default() };
        let (_, trace) = newton_solve(&r, un.values(), &cfg).unwrap();
        let n = &trace.residual_norms;
        assert!(n[3] < 1e-9 * n[0]);
        assert!(n[2] < 10.0 * n[1] * n[1] / n[0]);
        let fd = NewtonConfig { jacobian: JacobianMode::FiniteDifference, ..cfg };
        let (_, t2) = newton_solve(&r, un.values(), &fd).unwrap();
        assert!((t2.residual_norms[2] - n[2]).abs() < 1e-5 * n[0]);
    }

    #[test]
    fn newton_gmres_and_pseudo_conserve_mass() {
        let g = PeriodicGrid1D::new(40, 0.0, 1.0).unwrap().into();
        let un = StateField::from_fn(g, 1, |x| vec![1.0 + 0.3 * (2.0 * std::f64::consts::PI * x[0]).sin()]);
        let r = ImplicitEulerResidual::new(&un, 0.02, vec![Arc::new(BurgersLaxFriedrichs { lambda: 1.3 })]).unwrap();
        let m0 = un.total_mass()[0];
        let solvers = vec![
            LinearSolver::Gmres(GmresConfig { restart: 3, max_iter: 7, tol: 1e-3, ..Default::default() }),
            LinearSolver::PseudoTime(PseudoTimeSchedule::inverse_sqrt("ssprk3", 3).unwrap()),
            LinearSolver::Sequence(vec![
                LinearSolver::Gmres(GmresConfig { restart: 2, max_iter: 2, tol: 0.0, ..Default::default() }),
                LinearSolver::PseudoTime(PseudoTimeSchedule::inverse_sqrt("ssprk3", 2).unwrap()),
            ]),
        ];
        for linear in solvers {
            for guess in [InitialGuess::Zero, InitialGuess::ExplicitEuler] {
                let cfg = NewtonConfig { max_iter: 3, abs_tol: 0.0, linear: linear.clone(), guess, ..Default::default() };
                let (v, _) = newton_solve(&r, un.values(), &cfg).unwrap();
                let m1 = crate::grid::total_mass(&g, 1, &v)[0];
                assert!((m1 - m0).abs() / m0.abs().max(1.0) < 1e-12, "{}", linear.describe());
            }
        }
    }

    #[test]
    fn evaluation_accounting() {
        let r = advection_residual(20, 0.05);
        let cfg = NewtonConfig {
            max_iter: 2,
            abs_tol: 0.0,
            linear: LinearSolver::Gmres(GmresConfig { restart: 10, max_iter: 3, tol: 0.0, ..Default::default() }),
            final_residual: false,
            ..Default::default()
        };
        let (_, trace) = newton_solve(&r, r.base(), &cfg).unwrap();
        // one evaluation per Newton iteration plus one per GMRES matvec
        assert_eq!(trace.evaluations, 2 + 3 + 3);
        assert_eq!(trace.cumulative_evaluations, vec![1, 5]);
        let consistent = NewtonConfig { guess: InitialGuess::ExplicitEuler, ..cfg };
        let (_, t2) = newton_solve(&r, r.base(), &consistent).unwrap();
        assert_eq!(t2.cumulative_evaluations[0], trace.cumulative_evaluations[0]);
        assert!(t2.linear.iter().all(|l| l.guess_evaluations == 0));
    }

    #[test]
    fn newton_flux_on_constant_state() {
        let g: Grid<f64> = PeriodicGrid1D::new(6, 0.0, 1.0).unwrap().into();
        let flux: FluxRef<f64> = Arc::new(BurgersLaxFriedrichs { lambda: 0.7 });
        let v = vec![0.8; 6];
        let h = newton_interface_flux(&g, 0, &flux, &v, &[0.0; 6]).unwrap();
        assert!(h.iter().all(|x| (x - 0.32).abs() < 1e-15));
    }

    #[test]
    fn newton_update_is_conservative_with_newton_flux() {
        let g: Grid<f64> = PeriodicGrid1D::new(25, 0.0, 1.0).unwrap().into();
        let un = StateField::from_fn(g, 1, |x| vec![0.5 + 0.4 * (2.0 * std::f64::consts::PI * x[0]).cos()]);
        let flux: FluxRef<f64> = Arc::new(BurgersLaxFriedrichs { lambda: 1.0 });
        let r = ImplicitEulerResidual::new(&un, 0.03, vec![flux.clone()]).unwrap();
        let cfg = NewtonConfig { max_iter: 2, abs_tol: 0.0, jacobian: JacobianMode::Analytic, ..Default::default() };
        let (_, trace) = newton_solve(&r, un.values(), &cfg).unwrap();
        let dx = 1.0 / 25.0;
        for k in 0..2 {
            let (v, next) = (&trace.iterates[k], &trace.iterates[k + 1]);
            let dv: Vec<f64> = next.iter().zip(v).map(|(a, b)| a - b).collect();
            let h = newton_interface_flux(&g, 0, &flux, v, &dv).unwrap();
            for i in 0..25 {
                let res = (next[i] - un.values()[i]) / 0.03 + (h[i] - h[(i + 24) % 25]) / dx;
                assert!(res.abs() < 1e-11, "{res}");
            }
        }
    }

    #[test]
    fn invalid_forcing_is_rejected() {
        let cfg = NewtonConfig::<f64> {
            forcing: Forcing::EisenstatWalker { gamma: 0.9, eta_max: 1.5, eta0: 0.5 },
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })));
    }
}

//! A posteriori conservation checks: effective interface fluxes of a
//! pseudo-time solve, the flux-difference residual they certify, mass drift,
//! and the propagation speed factor a run actually realizes.

use serde::{Deserialize, Serialize};

use crate::butcher::{ButcherTableau, V_VECTOR_TOL};
use crate::error::{Error, Result};
use crate::grid::{total_mass, Grid, PeriodicGrid1D, PeriodicGrid2D, StateField};
use crate::pseudo_time::{PseudoIterationTrace, PseudoTimeSchedule};
use crate::residual::{add_divergence, FaceFluxes};
use crate::scalar::Real;

/// Result of auditing one time step or run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    /// Largest cell-wise violation of the flux-difference form, when fluxes
    /// were available.
    pub telescoping_residual: Option<f64>,
    pub mass_drift: Vec<f64>,
    pub effective_c: Option<f64>,
    pub method: String,
}

impl ConservationReport {
    pub fn is_valid(&self) -> bool {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        self.telescoping_residual.map_or(true, ok) && self.mass_drift.iter().all(|&x| ok(x)) && self.effective_c.map_or(true, ok)
    }
}

/// Effective interface fluxes of `N` pseudo-time iterations:
/// `h = Σ_k (μ_k b_kᵀ(I + μ_k A_k)⁻¹ ⊗ I) (Π_{l>k} φ_l(−μ_l)) F^(k)`, with
/// `F^(k)` the stacked stage fluxes of iteration `k`. Applied direction by
/// direction on 2D grids.
pub fn reconstruct_h_flux<T: Real>(
    grid: &Grid<T>,
    block: usize,
    trace: &PseudoIterationTrace<T>,
    schedule: &PseudoTimeSchedule<T>,
) -> Result<FaceFluxes<T>> {
    let steps = schedule.steps();
    let mut h = FaceFluxes::zeros(grid, block);
    if steps.is_empty() {
        return Ok(h);
    }
    if trace.stage_fluxes.len() != steps.len() {
        return Err(Error::MissingTrace);
    }
    // trailing[k] = Π_{l=k+1}^{N-1} φ_l(−μ_l)
    let mut trailing = vec![T::one(); steps.len()];
    for k in (0..steps.len() - 1).rev() {
        let st = &steps[k + 1];
        trailing[k] = trailing[k + 1] * st.tableau.stability_function(-st.mu)?;
    }
    for (k, st) in steps.iter().enumerate() {
        let stages = &trace.stage_fluxes[k];
        if stages.len() != st.tableau.stages() {
            return Err(Error::MissingTrace);
        }
        let w = st.tableau.stage_weights(st.mu)?;
        for (j, faces) in stages.iter().enumerate() {
            if faces.block != block {
                return Err(Error::DimensionMismatch { expected: block, got: faces.block });
            }
            h.add_scaled(st.mu * w[j] * trailing[k], faces);
        }
    }
    Ok(h)
}

/// Max-norm over cells and components of
/// `(u_np1 − u_n)/Δt + Σ_d (h_d[c] − h_d[c − e_d])/h_d`.
pub fn check_local_conservation<T: Real>(grid: &Grid<T>, u_n: &[T], u_np1: &[T], h: &FaceFluxes<T>, dt: T) -> Result<T> {
    let len = grid.n_cells() * h.block;
    if u_n.len() != len || u_np1.len() != len {
        return Err(Error::DimensionMismatch { expected: len, got: u_n.len().min(u_np1.len()) });
    }
    let mut r: Vec<T> = u_np1.iter().zip(u_n).map(|(&a, &b)| (a - b) / dt).collect();
    add_divergence(grid, h, &mut r);
    Ok(r.iter().fold(T::zero(), |acc, x| acc.max(x.abs())))
}

/// `|M(u_np1) − M(u_n)| / max(1, |M(u_n)|)` per component.
pub fn mass_drift<T: Real>(grid: &Grid<T>, m: usize, u_n: &[T], u_np1: &[T]) -> Vec<T> {
    let before = total_mass(grid, m, u_n);
    let after = total_mass(grid, m, u_np1);
    before.iter().zip(&after).map(|(&b, &a)| (a - b).abs() / b.abs().max(T::one())).collect()
}

/// Contracts fluxes of a stacked IRK stage system with `v` (`vᵀA = bᵀ`,
/// `vᵀ1 = 1`), giving the interface fluxes of the extracted step.
pub fn contract_stage_fluxes<T: Real>(tab: &ButcherTableau<T>, h: &FaceFluxes<T>, m: usize) -> Result<FaceFluxes<T>> {
    let v = tab.find_v(T::lit(V_VECTOR_TOL)).ok_or_else(|| Error::NoVVector(tab.name().to_string()))?;
    let s = tab.stages();
    if h.block != s * m {
        return Err(Error::DimensionMismatch { expected: s * m, got: h.block });
    }
    let dirs = h
        .dirs
        .iter()
        .map(|d| {
            let mut out = Vec::with_capacity(d.len() / s);
            for cell in d.chunks_exact(s * m) {
                out.extend((0..m).map(|k| (0..s).map(|j| v[j] * cell[j * m + k]).sum::<T>()));
            }
            out
        })
        .collect();
    Ok(FaceFluxes { block: m, dirs })
}

const GOLDEN_LOWER: f64 = 0.0;
const GOLDEN_UPPER: f64 = 1.2;
pub const EFFECTIVE_C_TOL: f64 = 1e-4;

/// Speed factor `c ∈ [0, 1.2]` whose translated exact solution is closest,
/// in the discrete L2 norm of `component`, to `u_final`. `exact(c)` returns
/// the reference field of the modified law. Golden-section search to `1e-4`.
pub fn measure_effective_c<T: Real>(
    u_final: &StateField<T>,
    component: usize,
    exact: &dyn Fn(T) -> Result<StateField<T>>,
) -> Result<T> {
    let distance = |c: T| -> Result<T> {
        let reference = exact(c)?;
        if reference.grid() != u_final.grid() || reference.components() != u_final.components() {
            return Err(Error::DimensionMismatch { expected: u_final.values().len(), got: reference.values().len() });
        }
        let m = u_final.components();
        let sq: T = u_final
            .values()
            .chunks_exact(m)
            .zip(reference.values().chunks_exact(m))
            .map(|(a, b)| (a[component] - b[component]) * (a[component] - b[component]))
            .sum();
        Ok((sq * u_final.grid().cell_volume()).sqrt())
    };
    let inv_phi = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (T::lit(GOLDEN_LOWER), T::lit(GOLDEN_UPPER));
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (distance(x1)?, distance(x2)?);
    while b - a > T::lit(EFFECTIVE_C_TOL) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = distance(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = distance(x2)?;
        }
    }
    Ok((a + b) / T::lit(2.0))
}

/// Grid description stored in run artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    #[serde(default)]
    pub ny: Option<usize>,
    pub x: [f64; 2],
    #[serde(default)]
    pub y: Option<[f64; 2]>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid<f64>> {
        match (self.ny, self.y) {
            (None, None) => Ok(PeriodicGrid1D::new(self.nx, self.x[0], self.x[1])?.into()),
            (Some(ny), Some(y)) => Ok(PeriodicGrid2D::new(self.nx, ny, (self.x[0], self.x[1]), (y[0], y[1]))?.into()),
            _ => Err(Error::config("grid", "ny and y must be given together")),
        }
    }

    pub fn of(grid: &Grid<f64>) -> Self {
        match grid {
            Grid::OneD(g) => Self { nx: g.n, ny: None, x: [g.x_min, g.x_max], y: None },
            Grid::TwoD(g) => Self { nx: g.nx, ny: Some(g.ny), x: [g.x_min, g.x_max], y: Some([g.y_min, g.y_max]) },
        }
    }
}

/// One audited step as written by `run` and read by `audit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepArtifact {
    pub dt: f64,
    pub u_n: Vec<f64>,
    pub u_np1: Vec<f64>,
    /// Effective interface fluxes per direction, when the solver was traced.
    #[serde(default)]
    pub h: Option<Vec<Vec<f64>>>,
}

/// A run's state snapshots and optional flux traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArtifact {
    pub method: String,
    pub grid: GridSpec,
    pub components: usize,
    pub steps: Vec<StepArtifact>,
    #[serde(default)]
    pub effective_c: Option<f64>,
}

impl RunArtifact {
    /// Worst telescoping residual over traced steps and the mass drift
    /// between the first and the last snapshot.
    pub fn audit(&self) -> Result<ConservationReport> {
        let grid = self.grid.build()?;
        let m = self.components;
        let len = grid.n_cells() * m;
        let mut telescoping: Option<f64> = None;
        for (i, st) in self.steps.iter().enumerate() {
            if st.u_n.len() != len || st.u_np1.len() != len {
                return Err(Error::config(format!("steps[{i}]"), "state length does not match the grid"));
            }
            if let Some(h) = &st.h {
                if h.len() != grid.dims() || h.iter().any(|d| d.len() != len) {
                    return Err(Error::config(format!("steps[{i}].h"), "flux field does not match the grid"));
                }
                let faces = FaceFluxes { block: m, dirs: h.clone() };
                let r = check_local_conservation(&grid, &st.u_n, &st.u_np1, &faces, st.dt)?;
                telescoping = Some(telescoping.map_or(r, |t| t.max(r)));
            }
        }
        let mass = match (self.steps.first(), self.steps.last()) {
            (Some(first), Some(last)) => mass_drift(&grid, m, &first.u_n, &last.u_np1),
            _ => vec![0.0; m],
        };
        Ok(ConservationReport { telescoping_residual: telescoping, mass_drift: mass, effective_c: self.effective_c, method: self.method.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::butcher::builtin;
    use crate::flux::{AdvectionCentral, BurgersLaxFriedrichs, FluxRef, LinearSystemFlux};
    use crate::pseudo_time::{consistency_factor, iterate, PseudoStep};
    use crate::residual::{ConservativeResidual, ImplicitEulerResidual, IrkStageResidual};
    use crate::pseudo_time::irk_step_extract_for;
    use proptest::prelude::*;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid(n: usize) -> Grid<f64> {
        PeriodicGrid1D::new(n, 0.0, 1.0).unwrap().into()
    }

    fn wave(g: Grid<f64>) -> StateField<f64> {
        StateField::from_fn(g, 1, |x| vec![1.0 + 0.5 * (2.0 * PI * x[0]).sin()])
    }

    #[test]
    fn single_euler_step_gives_flux_of_initial_states() {
        let g = grid(12);
        let un = wave(g);
        let flux: FluxRef<f64> = Arc::new(BurgersLaxFriedrichs { lambda: 1.1 });
        let r = ImplicitEulerResidual::new(&un, 0.02, vec![flux.clone()]).unwrap();
        let sched = PseudoTimeSchedule::new(vec![PseudoStep { tableau: Arc::new(builtin("explicit-euler").unwrap()), mu: 1.0 }]).unwrap();
        let (_, trace) = iterate(&sched, &r, un.values(), true).unwrap();
        let h = reconstruct_h_flux(&g, 1, &trace, &sched).unwrap();
        let v = un.values();
        for i in 0..12 {
            let mut f = [0.0];
            flux.evaluate(&v[i..i + 1], &v[(i + 1) % 12..(i + 1) % 12 + 1], &mut f).unwrap();
            assert!((h.dirs[0][i] - f[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_state_gives_c_times_flux() {
        let g = grid(8);
        let un = StateField::from_fn(g, 1, |_| vec![0.7]);
        let r = ImplicitEulerResidual::new(&un, 0.1, vec![Arc::new(BurgersLaxFriedrichs { lambda: 1.0 })]).unwrap();
        let sched = PseudoTimeSchedule::inverse_sqrt("ssprk3", 3).unwrap();
        let (_, trace) = iterate(&sched, &r, un.values(), true).unwrap();
        let h = reconstruct_h_flux(&g, 1, &trace, &sched).unwrap();
        let c = consistency_factor(&sched);
        assert!(h.dirs[0].iter().all(|x| (x - c * 0.245).abs() < 1e-14));
    }

    #[test]
    fn empty_schedule_gives_zero_flux() {
        let g = grid(5);
        let trace = PseudoIterationTrace { iterates: vec![vec![0.0; 5]], ..Default::default() };
        let h = reconstruct_h_flux(&g, 1, &trace, &PseudoTimeSchedule::empty()).unwrap();
        assert!(h.dirs[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn untraced_run_is_reported() {
        let g = grid(6);
        let un = wave(g);
        let r = ImplicitEulerResidual::new(&un, 0.1, vec![Arc::new(AdvectionCentral { a: 1.0 })]).unwrap();
        let sched = PseudoTimeSchedule::inverse_sqrt("ssprk3", 2).unwrap();
        let (_, trace) = iterate(&sched, &r, un.values(), false).unwrap();
        assert!(matches!(reconstruct_h_flux(&g, 1, &trace, &sched), Err(Error::MissingTrace)));
    }

    #[test]
    fn perturbation_shows_up_in_one_cell() {
        let g = grid(10);
        let un = wave(g);
        let mut u1 = un.values().to_vec();
        u1[4] += 1e-3;
        let h = FaceFluxes::zeros(&g, 1);
        assert_eq!(check_local_conservation(&g, un.values(), un.values(), &h, 0.5).unwrap(), 0.0);
        let r = check_local_conservation(&g, un.values(), &u1, &h, 0.5).unwrap();
        assert!((r - 2e-3).abs() < 1e-15);
        let d = mass_drift(&g, 1, un.values(), &u1);
        assert!((d[0] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn stacked_irk_pseudo_solve_is_conservative() {
        let g = grid(16);
        let un = wave(g);
        let tab = builtin::<f64>("lobatto-iiic-3").unwrap();
        let r = IrkStageResidual::new(&tab, &un, 0.05, vec![Arc::new(AdvectionCentral { a: 1.0 })]).unwrap();
        let sched = PseudoTimeSchedule::inverse_sqrt("ssprk3", 3).unwrap();
        let (v, trace) = iterate(&sched, &r, r.base(), true).unwrap();
        let h = reconstruct_h_flux(&g, 3, &trace, &sched).unwrap();
        assert!(check_local_conservation(&g, r.base(), &v, &h, 0.05).unwrap() < 1e-10);
        let u1 = irk_step_extract_for(&tab, &v, 1).unwrap();
        let hc = contract_stage_fluxes(&tab, &h, 1).unwrap();
        assert!(check_local_conservation(&g, un.values(), &u1, &hc, 0.05).unwrap() < 1e-10);
        let midpoint = builtin::<f64>("implicit-midpoint").unwrap();
        let h1 = FaceFluxes::zeros(&g, 1);
        assert!(matches!(contract_stage_fluxes(&midpoint, &h1, 1), Err(Error::NoVVector(_))));
    }

    #[test]
    fn effective_c_recovers_synthetic_shift() {
        let g = grid(200);
        let profile = |x: f64| (2.0 * PI * x).sin() + 0.3 * (4.0 * PI * x).cos();
        let t = 0.3;
        let exact = move |c: f64| -> Result<StateField<f64>> { Ok(StateField::from_fn(g, 1, |x| vec![profile(x[0] - c * t)])) };
        let u = exact(0.5).unwrap();
        let c = measure_effective_c(&u, 0, &exact).unwrap();
        assert!((c - 0.5).abs() < 1e-3);
    }

    #[test]
    fn artifact_round_trip_and_audit() {
        let g = grid(6);
        let un = wave(g);
        let art = RunArtifact {
            method: "none".into(),
            grid: GridSpec::of(&g),
            components: 1,
            steps: vec![StepArtifact { dt: 0.1, u_n: un.values().to_vec(), u_np1: un.values().to_vec(), h: Some(vec![vec![0.0; 6]]) }],
            effective_c: None,
        };
        let back: RunArtifact = serde_json::from_str(&serde_json::to_string(&art).unwrap()).unwrap();
        let rep = back.audit().unwrap();
        assert_eq!(rep.telescoping_residual, Some(0.0));
        assert_eq!(rep.mass_drift, vec![0.0]);
        assert!(rep.is_valid());
    }

    fn schedule_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
        prop::collection::vec((0usize..2, 0.05f64..1.5), 0..5)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pseudo_time_runs_telescope(steps in schedule_strategy(), seed in 0u64..1000) {
            let names = ["explicit-euler", "ssprk3"];
            let sched = PseudoTimeSchedule::new(
                steps.iter().map(|&(i, mu)| PseudoStep { tableau: Arc::new(builtin(names[i]).unwrap()), mu }).collect(),
            ).unwrap();
            let g = grid(20);
            let phase = seed as f64 * 0.01;
            let un = StateField::from_fn(g, 2, |x| vec![1.0 + 0.3 * (2.0 * PI * x[0] + phase).sin(), 0.2 * (2.0 * PI * x[0]).cos()]);
            let flux: FluxRef<f64> = Arc::new(LinearSystemFlux::new(2, vec![0.0, 1.0, 1.0, 0.0], 1.0).unwrap());
            let r = ImplicitEulerResidual::new(&un, 0.03, vec![flux]).unwrap();
            let (v, trace) = iterate(&sched, &r, un.values(), true).unwrap();
            let h = reconstruct_h_flux(&g, 2, &trace, &sched).unwrap();
            prop_assert!(check_local_conservation(&g, un.values(), &v, &h, 0.03).unwrap() < 1e-10);
        }
    }
}

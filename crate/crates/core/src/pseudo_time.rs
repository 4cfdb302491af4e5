//! Explicit Runge-Kutta pseudo-time iteration `du/dτ = −g(u)` toward the root
//! of an implicit-step residual, the consistency factor `c` of a schedule,
//! and extraction of IRK steps from stage stacks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::butcher::{builtin, ButcherTableau};
use crate::error::{Error, Result};
use crate::krylov::LinearOperator;
use crate::residual::{ConservativeResidual, FaceFluxes};
use crate::scalar::{axpy, Real};

/// One pseudo-time iteration: an explicit tableau and `μ = Δτ/Δt`.
#[derive(Clone, Debug)]
pub struct PseudoStep<T> {
    pub tableau: Arc<ButcherTableau<T>>,
    pub mu: T,
}

/// Config form of a schedule entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub method: String,
    pub mu: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PseudoTimeSchedule<T> {
    steps: Vec<PseudoStep<T>>,
}

impl<T: Real> PseudoTimeSchedule<T> {
    pub fn new(steps: Vec<PseudoStep<T>>) -> Result<Self> {
        for st in &steps {
            if !st.tableau.is_explicit() {
                return Err(Error::NotExplicit(st.tableau.name().to_string()));
            }
            if !(st.mu > T::zero()) {
                return Err(Error::config("mu", format!("pseudo-time ratio must be positive, got {}", st.mu)));
            }
        }
        Ok(Self { steps })
    }

    pub fn empty() -> Self {
        Self { steps: Vec::new() }
    }

    pub fn from_entries(entries: &[ScheduleEntry]) -> Result<Self> {
        let steps = entries
            .iter()
            .map(|e| Ok(PseudoStep { tableau: Arc::new(builtin(&e.method)?), mu: T::lit(e.mu) }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    /// `n` steps of one method with `μ_i = 1/√i`, `i = 1..n`.
    pub fn inverse_sqrt(method: &str, n: usize) -> Result<Self> {
        let tab = Arc::new(builtin(method)?);
        Self::new(
            (1..=n)
                .map(|i| PseudoStep { tableau: tab.clone(), mu: T::one() / T::from_count(i).sqrt() })
                .collect(),
        )
    }

    pub fn steps(&self) -> &[PseudoStep<T>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_entries(&self) -> Vec<ScheduleEntry> {
        self.steps
            .iter()
            .map(|s| ScheduleEntry { method: s.tableau.name().to_string(), mu: s.mu.as_f64() })
            .collect()
    }

    /// `Π_l φ_l(−μ_l)`.
    pub fn stability_product(&self) -> T {
        self.steps
            .iter()
            .map(|s| s.tableau.stability_function(-s.mu).expect("explicit tableaux have no poles"))
            .fold(T::one(), |acc, x| acc * x)
    }
}

/// One explicit RK step of size `dtau` for `du/dτ = rhs(u)`.
pub fn erk_step<T: Real>(
    tab: &ButcherTableau<T>,
    dtau: T,
    u: &[T],
    mut rhs: impl FnMut(&[T], &mut [T]) -> Result<()>,
) -> Result<Vec<T>> {
    erk_step_with(tab, dtau, u, |_, stage, out| rhs(stage, out))
}

/// Like [`erk_step`] but passes the stage index to `rhs`.
fn erk_step_with<T: Real>(
    tab: &ButcherTableau<T>,
    dtau: T,
    u: &[T],
    mut rhs: impl FnMut(usize, &[T], &mut [T]) -> Result<()>,
) -> Result<Vec<T>> {
    if !tab.is_explicit() {
        return Err(Error::NotExplicit(tab.name().to_string()));
    }
    let s = tab.stages();
    let mut k: Vec<Vec<T>> = Vec::with_capacity(s);
    let mut stage = u.to_vec();
    for j in 0..s {
        stage.copy_from_slice(u);
        for (l, kl) in k.iter().enumerate() {
            let a = tab.a(j, l);
            if a != T::zero() {
                axpy(dtau * a, kl, &mut stage);
            }
        }
        let mut kj = vec![T::zero(); u.len()];
        rhs(j, &stage, &mut kj)?;
        k.push(kj);
    }
    let mut next = u.to_vec();
    for (bj, kj) in tab.b().iter().zip(&k) {
        if *bj != T::zero() {
            axpy(dtau * *bj, kj, &mut next);
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonphysicalState { cell: 0, reason: "pseudo-time step produced a nonfinite value".into() });
    }
    Ok(next)
}

/// One ERK step of `du/dτ = −g(u)` with `Δτ = μΔt`. When `record` is set the
/// interface fluxes of every stage are returned.
pub fn erk_pseudo_step<T: Real>(
    residual: &dyn ConservativeResidual<T>,
    u: &[T],
    tab: &ButcherTableau<T>,
    mu: T,
    record: bool,
) -> Result<(Vec<T>, Option<Vec<FaceFluxes<T>>>)> {
    let mut stages = Vec::new();
    let next = erk_step(tab, mu * residual.dt(), u, |stage, out| {
        let (g, faces) = residual.evaluate_with_faces(stage)?;
        for (o, x) in out.iter_mut().zip(g) {
            *o = -x;
        }
        if record {
            stages.push(faces);
        }
        Ok(())
    })?;
    Ok((next, record.then_some(stages)))
}

/// Iterates and optional stage fluxes of a pseudo-time solve.
#[derive(Clone, Debug, Default)]
pub struct PseudoIterationTrace<T> {
    /// `u^(0), …, u^(N)`.
    pub iterates: Vec<Vec<T>>,
    /// `stage_fluxes[k][j]`: interface fluxes of stage `j` of iteration `k`.
    pub stage_fluxes: Vec<Vec<FaceFluxes<T>>>,
    pub evaluations: usize,
}

impl<T> PseudoIterationTrace<T> {
    pub fn has_fluxes(&self) -> bool {
        !self.stage_fluxes.is_empty() || self.iterates.len() <= 1
    }
}

/// Applies every step of `schedule` starting from `u0`.
pub fn iterate<T: Real>(
    schedule: &PseudoTimeSchedule<T>,
    residual: &dyn ConservativeResidual<T>,
    u0: &[T],
    record: bool,
) -> Result<(Vec<T>, PseudoIterationTrace<T>)> {
    let start = residual.evaluations();
    let mut trace = PseudoIterationTrace { iterates: vec![u0.to_vec()], ..Default::default() };
    let mut u = u0.to_vec();
    for st in schedule.steps() {
        let (next, faces) = erk_pseudo_step(residual, &u, &st.tableau, st.mu, record)?;
        if let Some(f) = faces {
            trace.stage_fluxes.push(f);
        }
        trace.iterates.push(next.clone());
        u = next;
    }
    trace.evaluations = residual.evaluations() - start;
    Ok((u, trace))
}

/// Pseudo-time iteration on the linear system `Jx = d`, i.e.
/// `dx/dτ = d − Jx`, with `Δτ = μΔt`.
pub fn iterate_linear<T: Real>(
    schedule: &PseudoTimeSchedule<T>,
    op: &dyn LinearOperator<T>,
    d: &[T],
    x0: &[T],
    dt: T,
) -> Result<Vec<T>> {
    let mut x = x0.to_vec();
    for st in schedule.steps() {
        x = erk_step(&st.tableau, st.mu * dt, &x, |stage, out| {
            op.apply(stage, out)?;
            for (o, &di) in out.iter_mut().zip(d) {
                *o = di - *o;
            }
            Ok(())
        })?;
    }
    Ok(x)
}

/// `c = 1 − Π_l φ_l(−μ_l)`; the empty schedule gives `c = 0`.
pub fn consistency_factor<T: Real>(schedule: &PseudoTimeSchedule<T>) -> T {
    T::one() - schedule.stability_product()
}

/// `c = 1 − (Π_l φ_l(−μ_l))^K` for `K` Newton iterations that each run the
/// same pseudo-time schedule on the linear system.
pub fn newton_pseudo_consistency_factor<T: Real>(schedule: &PseudoTimeSchedule<T>, newton_iterations: usize) -> T {
    T::one() - schedule.stability_product().powi(newton_iterations as i32)
}

/// Prepends one explicit Euler iteration with `μ = 1`, whose stability
/// function vanishes at `−1`, so the result has `c = 1`.
pub fn enforce_flux_consistency<T: Real>(schedule: &PseudoTimeSchedule<T>) -> PseudoTimeSchedule<T> {
    let euler = Arc::new(builtin("explicit-euler").expect("builtin explicit Euler"));
    let mut steps = vec![PseudoStep { tableau: euler, mu: T::one() }];
    steps.extend(schedule.steps().iter().cloned());
    PseudoTimeSchedule { steps }
}

/// `u_c = (vᵀ ⊗ I) U_c` for every cell of a stacked stage field.
pub fn irk_step_extract<T: Real>(stacked: &[T], v: &[T], m: usize) -> Result<Vec<T>> {
    let s = v.len();
    if s == 0 || stacked.len() % (s * m) != 0 {
        return Err(Error::DimensionMismatch { expected: s * m, got: stacked.len() });
    }
    let mut out = Vec::with_capacity(stacked.len() / s);
    for cell in stacked.chunks_exact(s * m) {
        for k in 0..m {
            out.push((0..s).map(|j| v[j] * cell[j * m + k]).sum());
        }
    }
    Ok(out)
}

/// Extraction with the tableau's own v-vector.
pub fn irk_step_extract_for<T: Real>(tab: &ButcherTableau<T>, stacked: &[T], m: usize) -> Result<Vec<T>> {
    let v = tab
        .find_v(T::lit(crate::butcher::V_VECTOR_TOL))
        .ok_or_else(|| Error::NoVVector(tab.name().to_string()))?;
    irk_step_extract(stacked, &v, m)
}

//! Restarted GMRES, recovery of the Krylov polynomial of an iterate, and the
//! explicit Runge-Kutta method whose single pseudo-time step reproduces it.

use serde::{Deserialize, Serialize};

use crate::butcher::{ButcherTableau, TableauKind};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::pseudo_time::erk_step;
use crate::scalar::{axpy, dot, norm2, Real};

/// A linear map `x ↦ Mx`.
pub trait LinearOperator<T: Real> {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[T], out: &mut [T]) -> Result<()>;
}

impl<T: Real> LinearOperator<T> for DenseMatrix<T> {
    fn dim(&self) -> usize {
        self.rows()
    }
    fn apply(&self, x: &[T], out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&self.matvec(x));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmresConfig {
    /// Krylov dimension per cycle.
    pub restart: usize,
    /// Cap on the total number of Arnoldi steps across cycles.
    pub max_iter: usize,
    /// Stop once `‖d − Mw‖ ≤ tol·‖d‖`.
    pub tol: f64,
    /// Keep every iterate `w^(j)` in the trace.
    pub record_iterates: bool,
    /// Keep Arnoldi bases and Hessenberg matrices in the trace.
    pub record_basis: bool,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { restart: 30, max_iter: 200, tol: 1e-10, record_iterates: false, record_basis: false }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restart == 0 {
            return Err(Error::config("gmres.restart", "must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("gmres.tol", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Arnoldi data of one restart cycle.
#[derive(Clone, Debug)]
pub struct ArnoldiCycle<T> {
    pub basis: Vec<Vec<T>>,
    /// `(j+1) × j` Hessenberg entries after the Givens rotations (upper
    /// triangular part), row-major with `j` columns.
    pub hessenberg: Vec<T>,
    pub steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct KrylovTrace<T> {
    /// `w^(0), w^(1), …` when iterates are recorded.
    pub iterates: Vec<Vec<T>>,
    /// Residual norm before the first step and after every step.
    pub residual_norms: Vec<T>,
    pub cycles: Vec<ArnoldiCycle<T>>,
    pub iterations: usize,
    pub matvecs: usize,
    pub converged: bool,
    pub breakdown: bool,
    pub stagnated: bool,
}

fn is_zero<T: Real>(x: &[T]) -> bool {
    x.iter().all(|&v| v == T::zero())
}

/// Solves the `j × j` upper triangular system stored in `h` (row stride `cols`).
fn back_substitute<T: Real>(h: &[T], cols: usize, g: &[T], j: usize) -> Vec<T> {
    let mut y = vec![T::zero(); j];
    for i in (0..j).rev() {
        let mut acc = g[i];
        for k in i + 1..j {
            acc -= h[i * cols + k] * y[k];
        }
        y[i] = acc / h[i * cols + i];
    }
    y
}

/// GMRES(m) on `Mw = d` from `w0`. Arnoldi uses modified Gram-Schmidt with
/// one reorthogonalization pass. A zero `w0` skips the initial matvec.
pub fn gmres<T: Real>(
    op: &dyn LinearOperator<T>,
    d: &[T],
    w0: &[T],
    cfg: &GmresConfig,
) -> Result<(Vec<T>, KrylovTrace<T>)> {
    cfg.validate()?;
    let n = op.dim();
    if d.len() != n || w0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: d.len().min(w0.len()) });
    }
    let mut trace = KrylovTrace::default();
    let mut x = w0.to_vec();
    let mut r = d.to_vec();
    if !is_zero(w0) {
        let mut mx = vec![T::zero(); n];
        op.apply(&x, &mut mx)?;
        trace.matvecs += 1;
        axpy(-T::one(), &mx, &mut r);
    }
    let target = T::lit(cfg.tol) * norm2(d);
    let mut beta = norm2(&r);
    trace.residual_norms.push(beta);
    if cfg.record_iterates {
        trace.iterates.push(x.clone());
    }
    if !beta.is_finite() {
        return Err(Error::LinearSolveFailed("nonfinite initial residual".into()));
    }
    let m = cfg.restart;
    while trace.iterations < cfg.max_iter && beta > target {
        let cols = m;
        let mut h = vec![T::zero(); (m + 1) * cols];
        let mut cs = vec![T::zero(); m];
        let mut sn = vec![T::zero(); m];
        let mut g = vec![T::zero(); m + 1];
        g[0] = beta;
        let mut basis: Vec<Vec<T>> = vec![r.iter().map(|&v| v / beta).collect()];
        let mut steps = 0;
        let mut resid = beta;
        let mut happy = false;
        let mut w = vec![T::zero(); n];
        for j in 0..m {
            if trace.iterations == cfg.max_iter {
                break;
            }
            op.apply(&basis[j], &mut w)?;
            trace.matvecs += 1;
            let w_norm0 = norm2(&w);
            for _pass in 0..2 {
                for (i, vi) in basis.iter().enumerate() {
                    let hij = dot(&w, vi);
                    h[i * cols + j] += hij;
                    axpy(-hij, vi, &mut w);
                }
            }
            let h_next = norm2(&w);
            // rotate the new column
            for i in 0..j {
                let (a, b) = (h[i * cols + j], h[(i + 1) * cols + j]);
                h[i * cols + j] = cs[i] * a + sn[i] * b;
                h[(i + 1) * cols + j] = -sn[i] * a + cs[i] * b;
            }
            let a = h[j * cols + j];
            let rho = a.hypot(h_next);
            if rho == T::zero() {
                return Err(Error::LinearSolveFailed("Arnoldi produced a zero column".into()));
            }
            cs[j] = a / rho;
            sn[j] = h_next / rho;
            h[j * cols + j] = rho;
            g[j + 1] = -sn[j] * g[j];
            g[j] = cs[j] * g[j];
            resid = g[j + 1].abs();
            steps = j + 1;
            trace.iterations += 1;
            trace.residual_norms.push(resid);
            if cfg.record_iterates {
                let y = back_substitute(&h, cols, &g, steps);
                let mut xi = x.clone();
                for (yk, vk) in y.iter().zip(&basis) {
                    axpy(*yk, vk, &mut xi);
                }
                trace.iterates.push(xi);
            }
            happy = h_next <= T::lit(1e-14) * w_norm0.max(T::min_positive_value());
            if happy {
                trace.breakdown = true;
                break;
            }
            basis.push(w.iter().map(|&v| v / h_next).collect());
            if resid <= target {
                break;
            }
        }
        let y = back_substitute(&h, cols, &g, steps);
        for (yk, vk) in y.iter().zip(&basis) {
            axpy(*yk, vk, &mut x);
        }
        if cfg.record_basis {
            let mut hess = vec![T::zero(); (steps + 1) * steps];
            for i in 0..=steps {
                for k in 0..steps {
                    hess[i * steps + k] = h[i * cols + k];
                }
            }
            basis.truncate(steps + 1);
            trace.cycles.push(ArnoldiCycle { basis, hessenberg: hess, steps });
        }
        let converged = resid <= target || happy;
        if converged || trace.iterations >= cfg.max_iter {
            beta = resid;
            if happy {
                beta = T::zero();
            }
            break;
        }
        // restart from the true residual
        let mut mx = vec![T::zero(); n];
        op.apply(&x, &mut mx)?;
        trace.matvecs += 1;
        r.copy_from_slice(d);
        axpy(-T::one(), &mx, &mut r);
        let new_beta = norm2(&r);
        if new_beta >= beta * (T::one() - T::lit(1e-12)) {
            trace.stagnated = true;
            beta = new_beta;
            break;
        }
        beta = new_beta;
    }
    trace.converged = beta <= target || trace.breakdown;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearSolveFailed("GMRES iterate is not finite".into()));
    }
    Ok((x, trace))
}

/// Least-squares fit of a Krylov correction on the monomial basis.
#[derive(Clone, Debug)]
pub struct AlphaFit<T> {
    pub alpha: Vec<T>,
    pub condition: T,
    /// `‖Δw − Σ α_ℓ M^ℓ r0‖ / ‖Δw‖`
    pub reconstruction_residual: T,
}

/// Condition estimate above which the monomial basis counts as degenerate.
pub const MAX_BASIS_CONDITION: f64 = 1e13;

/// Finds `α` with `w − w0 = Σ_{ℓ≤k} α_ℓ M^ℓ r0`, using unit-scaled columns.
pub fn recover_alpha_from<T: Real>(op: &dyn LinearOperator<T>, r0: &[T], w0: &[T], w: &[T], k: usize) -> Result<AlphaFit<T>> {
    let n = op.dim();
    let diff: Vec<T> = w.iter().zip(w0).map(|(&a, &b)| a - b).collect();
    let mut columns = vec![r0.to_vec()];
    for _ in 0..k {
        let mut next = vec![T::zero(); n];
        op.apply(columns.last().unwrap(), &mut next)?;
        columns.push(next);
    }
    let scales: Vec<T> = columns.iter().map(|c| norm2(c)).collect();
    if scales.iter().any(|&s| s == T::zero()) {
        return Err(Error::RankDeficient { condition: f64::INFINITY });
    }
    let basis = DenseMatrix::from_fn(n, k + 1, |i, j| columns[j][i] / scales[j]);
    let (y, condition) = basis.least_squares(&diff)?;
    if !condition.is_finite() || condition.as_f64() > MAX_BASIS_CONDITION {
        return Err(Error::RankDeficient { condition: condition.as_f64() });
    }
    let alpha: Vec<T> = y.iter().zip(&scales).map(|(&v, &s)| v / s).collect();
    let mut recon = diff.clone();
    for (a, c) in alpha.iter().zip(&columns) {
        axpy(-*a, c, &mut recon);
    }
    let denom = norm2(&diff).max(T::min_positive_value());
    Ok(AlphaFit { alpha, condition, reconstruction_residual: norm2(&recon) / denom })
}

/// Recovers `α` for the last recorded iterate of a GMRES run.
pub fn recover_alpha<T: Real>(trace: &KrylovTrace<T>, op: &dyn LinearOperator<T>, r0: &[T]) -> Result<AlphaFit<T>> {
    if trace.iterates.len() < 2 {
        return Err(Error::MissingTrace);
    }
    let k = trace.iterates.len() - 2;
    recover_alpha_from(op, r0, &trace.iterates[0], trace.iterates.last().unwrap(), k)
}

/// Explicit tableau with `k+1` stages, `−a` on the first subdiagonal, and
/// weights solving `Σ_{j≥ℓ} b_j = a^{−ℓ} α_ℓ / Δτ^{ℓ+1}`, so that one pseudo
/// step of size `Δτ` on `du/dτ = d − Mu` reproduces `w0 + Σ α_ℓ M^ℓ r0`.
pub fn krylov_to_erk_tableau<T: Real>(alpha: &[T], a: T, dtau: T) -> Result<ButcherTableau<T>> {
    if a == T::zero() || dtau == T::zero() {
        return Err(Error::ZeroParameter);
    }
    if alpha.is_empty() {
        return Err(Error::InvalidTableau("need at least one Krylov coefficient".into()));
    }
    let s = alpha.len();
    let mut mat = vec![T::zero(); s * s];
    for j in 1..s {
        mat[j * s + j - 1] = -a;
    }
    let c: Vec<T> = (0..s).map(|j| if j == 0 { T::zero() } else { -a }).collect();
    // tail sums t_ℓ = a^{-ℓ} α_ℓ / Δτ^{ℓ+1}; b_ℓ = t_ℓ − t_{ℓ+1}
    let tails: Vec<T> = alpha
        .iter()
        .enumerate()
        .map(|(l, &al)| al / (a.powi(l as i32) * dtau.powi(l as i32 + 1)))
        .collect();
    let b: Vec<T> = (0..s).map(|l| if l + 1 < s { tails[l] - tails[l + 1] } else { tails[l] }).collect();
    ButcherTableau::with_kind(format!("krylov-erk-{}", s), mat, b, c, TableauKind::Explicit)
}

/// Runs `k+1` GMRES steps, rebuilds the iterate as one ERK pseudo step with
/// the constructed tableau, and returns `‖u¹ − w^(k+1)‖ / ‖w^(k+1)‖`.
pub fn verify_krylov_erk_equivalence<T: Real>(m: &DenseMatrix<T>, d: &[T], w0: &[T], k: usize, a: T) -> Result<T> {
    let cfg = GmresConfig { restart: k + 1, max_iter: k + 1, tol: 0.0, record_iterates: true, record_basis: false };
    let (w, trace) = gmres(m, d, w0, &cfg)?;
    let mut r0 = d.to_vec();
    axpy(-T::one(), &m.matvec(w0), &mut r0);
    let fit = recover_alpha(&trace, m, &r0)?;
    let dtau = T::one();
    let tab = krylov_to_erk_tableau(&fit.alpha, a, dtau)?;
    let u1 = erk_step(&tab, dtau, w0, |u, out| {
        let mu = m.matvec(u);
        for ((o, &di), mi) in out.iter_mut().zip(d).zip(mu) {
            *o = di - mi;
        }
        Ok(())
    })?;
    let diff: Vec<T> = u1.iter().zip(&w).map(|(&x, &y)| x - y).collect();
    Ok(norm2(&diff) / norm2(&w).max(T::min_positive_value()))
}

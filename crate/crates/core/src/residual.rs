//! Nonlinear residuals of implicit steps written in flux-difference form,
//! `g_c(v) = (v_c − base_c)/Δt + Σ_d (F_d[c] − F_d[left_d(c)]) / h_d`,
//! and their Jacobians.
//!
//! Every residual exposes its interface fluxes separately from the
//! divergence so that Jacobian actions can be differenced at the face level,
//! which keeps the telescoping structure exact in floating point.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::butcher::ButcherTableau;
use crate::dense::{BandLu, BandMatrix, DenseMatrix};
use crate::error::{Error, Result};
use crate::flux::{split, FluxRef, FluxSymmetry};
use crate::grid::{weighted_norm, Grid, StateField};
use crate::krylov::LinearOperator;
use crate::scalar::Real;

/// Cell count above which face loops run on the rayon pool.
const PARALLEL_CELLS: usize = 2048;

/// Interface fluxes per direction. `dirs[d][c * block + k]` is the flux
/// through the high-side face of cell `c` in direction `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFluxes<T> {
    pub block: usize,
    pub dirs: Vec<Vec<T>>,
}

impl<T: Real> FaceFluxes<T> {
    pub fn zeros(grid: &Grid<T>, block: usize) -> Self {
        Self { block, dirs: vec![vec![T::zero(); grid.n_cells() * block]; grid.dims()] }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.dirs.iter_mut().zip(&other.dirs) {
            crate::scalar::axpy(alpha, b, a);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.dirs.iter_mut().flatten().for_each(|x| *x *= alpha);
    }
}

/// Per-face derivative blocks (`block × block`, row-major) with respect to
/// the low-side (`left`) and high-side (`right`) cell of each face.
#[derive(Clone, Debug)]
pub struct FaceDerivatives<T> {
    pub block: usize,
    pub left: Vec<Vec<T>>,
    pub right: Vec<Vec<T>>,
}

impl<T: Real> FaceDerivatives<T> {
    pub fn zeros(grid: &Grid<T>, block: usize) -> Self {
        let len = grid.n_cells() * block * block;
        Self { block, left: vec![vec![T::zero(); len]; grid.dims()], right: vec![vec![T::zero(); len]; grid.dims()] }
    }
}

/// `out[c] += Σ_d (F_d[c] − F_d[left_d(c)]) / h_d`
pub fn add_divergence<T: Real>(grid: &Grid<T>, faces: &FaceFluxes<T>, out: &mut [T]) {
    let b = faces.block;
    for (d, f) in faces.dirs.iter().enumerate() {
        let inv_h = T::one() / grid.spacing(d);
        for c in 0..grid.n_cells() {
            let l = grid.neighbor(c, d, false);
            for k in 0..b {
                out[c * b + k] += (f[c * b + k] - f[l * b + k]) * inv_h;
            }
        }
    }
}

/// Residual of an implicit step in conservative form.
pub trait ConservativeResidual<T: Real>: Send + Sync {
    fn grid(&self) -> &Grid<T>;

    /// Unknowns per cell: `m` for a single implicit stage, `s·m` for IRK stages.
    fn block_size(&self) -> usize;

    fn dt(&self) -> T;

    /// The constant state `v` is measured against (`u_n`, or `1 ⊗ u_n`).
    fn base(&self) -> &[T];

    /// Fills the interface fluxes at `v`. Counts as one evaluation of the
    /// space discretization.
    fn face_fluxes(&self, v: &[T], out: &mut FaceFluxes<T>) -> Result<()>;

    /// Analytic derivatives of the interface fluxes at `v`.
    fn face_derivatives(&self, v: &[T]) -> Result<FaceDerivatives<T>>;

    /// Number of `face_fluxes` calls so far.
    fn evaluations(&self) -> usize;

    fn dim(&self) -> usize {
        self.grid().n_cells() * self.block_size()
    }

    fn new_faces(&self) -> FaceFluxes<T> {
        FaceFluxes::zeros(self.grid(), self.block_size())
    }

    /// `g(v)` together with the interface fluxes it was built from.
    fn evaluate_with_faces(&self, v: &[T]) -> Result<(Vec<T>, FaceFluxes<T>)> {
        let mut faces = self.new_faces();
        self.face_fluxes(v, &mut faces)?;
        Ok((self.assemble(v, &faces), faces))
    }

    fn evaluate(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(self.evaluate_with_faces(v)?.0)
    }

    /// `(v − base)/Δt + div(faces)`.
    fn assemble(&self, v: &[T], faces: &FaceFluxes<T>) -> Vec<T> {
        let inv_dt = T::one() / self.dt();
        let mut out: Vec<T> = v.iter().zip(self.base()).map(|(&x, &b)| (x - b) * inv_dt).collect();
        add_divergence(self.grid(), faces, &mut out);
        out
    }
}

/// Evaluates one bivariate flux on every face of direction `dir`.
fn fill_direction<T: Real>(
    grid: &Grid<T>,
    dir: usize,
    block: usize,
    v: &[T],
    out: &mut [T],
    per_face: impl Fn(&[T], &[T], &mut [T]) -> Result<()> + Sync,
) -> Result<()> {
    let work = |(c, chunk): (usize, &mut [T])| -> Result<()> {
        let r = grid.neighbor(c, dir, true);
        per_face(&v[c * block..(c + 1) * block], &v[r * block..(r + 1) * block], chunk).map_err(|e| e.at_cell(c))
    };
    if grid.n_cells() >= PARALLEL_CELLS {
        out.par_chunks_mut(block).enumerate().try_for_each(work)
    } else {
        out.chunks_mut(block).enumerate().try_for_each(work)
    }
}

fn check_fluxes<T: Real>(grid: &Grid<T>, m: usize, fluxes: &[FluxRef<T>], dt: T) -> Result<()> {
    if fluxes.len() != grid.dims() {
        return Err(Error::DimensionMismatch { expected: grid.dims(), got: fluxes.len() });
    }
    if let Some(f) = fluxes.iter().find(|f| f.components() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: f.components() });
    }
    if !(dt > T::zero()) {
        return Err(Error::config("time.dt", "time step must be positive"));
    }
    Ok(())
}

/// Derivative blocks `(∂f̂/∂θ, ∂f̂/∂φ)` of a flux, assembled part by part from
/// its symmetric and antisymmetric splitting: for a part `P` with sign `σ`,
/// `∂P/∂θ(θ,φ) = σ ∂P/∂φ(φ,θ)`.
pub(crate) struct SplitDerivative<T: Real> {
    parts: Vec<(FluxRef<T>, T)>,
    m: usize,
}

impl<T: Real> SplitDerivative<T> {
    pub(crate) fn new(flux: &FluxRef<T>) -> Self {
        let parts = match flux.symmetry() {
            FluxSymmetry::Symmetric => vec![(flux.clone(), T::one())],
            FluxSymmetry::Antisymmetric => vec![(flux.clone(), -T::one())],
            FluxSymmetry::General => {
                let (s, a) = split(flux.clone());
                vec![(s, T::one()), (a, -T::one())]
            }
        };
        Self { parts, m: flux.components() }
    }

    pub(crate) fn blocks(&self, theta: &[T], phi: &[T], d_left: &mut [T], d_right: &mut [T]) -> Result<()> {
        let mm = self.m * self.m;
        let mut tmp = vec![T::zero(); mm];
        d_left.iter_mut().for_each(|x| *x = T::zero());
        d_right.iter_mut().for_each(|x| *x = T::zero());
        for (part, sigma) in &self.parts {
            part.d_right(theta, phi, &mut tmp)?;
            crate::scalar::axpy(T::one(), &tmp, d_right);
            part.d_right(phi, theta, &mut tmp)?;
            crate::scalar::axpy(*sigma, &tmp, d_left);
        }
        Ok(())
    }
}

/// `g(v) = (v − u_n)/Δt + Σ_d (f̂_d(v_c, v_{c+e_d}) − f̂_d(v_{c−e_d}, v_c))/h_d`
pub struct ImplicitEulerResidual<T: Real> {
    grid: Grid<T>,
    m: usize,
    dt: T,
    base: Vec<T>,
    fluxes: Vec<FluxRef<T>>,
    evals: AtomicUsize,
}

impl<T: Real> ImplicitEulerResidual<T> {
    /// `fluxes` holds one flux per grid direction.
    pub fn new(u_n: &StateField<T>, dt: T, fluxes: Vec<FluxRef<T>>) -> Result<Self> {
        let grid = *u_n.grid();
        let m = u_n.components();
        check_fluxes(&grid, m, &fluxes, dt)?;
        Ok(Self { grid, m, dt, base: u_n.values().to_vec(), fluxes, evals: AtomicUsize::new(0) })
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn fluxes(&self) -> &[FluxRef<T>] {
        &self.fluxes
    }
}

impl<T: Real> ConservativeResidual<T> for ImplicitEulerResidual<T> {
    fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    fn block_size(&self) -> usize {
        self.m
    }
    fn dt(&self) -> T {
        self.dt
    }
    fn base(&self) -> &[T] {
        &self.base
    }
    fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    fn face_fluxes(&self, v: &[T], out: &mut FaceFluxes<T>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        for (d, flux) in self.fluxes.iter().enumerate() {
            fill_direction(&self.grid, d, self.m, v, &mut out.dirs[d], |l, r, o| flux.evaluate(l, r, o))?;
        }
        Ok(())
    }

    fn face_derivatives(&self, v: &[T]) -> Result<FaceDerivatives<T>> {
        let m = self.m;
        let mut fd = FaceDerivatives::zeros(&self.grid, m);
        for (d, flux) in self.fluxes.iter().enumerate() {
            let sd = SplitDerivative::new(flux);
            let (left, right) = (&mut fd.left[d], &mut fd.right[d]);
            for c in 0..self.grid.n_cells() {
                let r = self.grid.neighbor(c, d, true);
                sd.blocks(
                    &v[c * m..(c + 1) * m],
                    &v[r * m..(r + 1) * m],
                    &mut left[c * m * m..(c + 1) * m * m],
                    &mut right[c * m * m..(c + 1) * m * m],
                )
                .map_err(|e| e.at_cell(c))?;
            }
        }
        Ok(fd)
    }
}

/// Stage system of an implicit Runge-Kutta step in conservative form,
/// `(V_c − 1⊗u_n)/Δt + (A⊗I) Σ_d (F̂_d[c] − F̂_d[left_d(c)])/h_d`,
/// where `F̂` applies the flux stage by stage. The unknowns of a cell are
/// stored stage after stage, `V_c = (V_c^1, …, V_c^s)`.
pub struct IrkStageResidual<T: Real> {
    grid: Grid<T>,
    m: usize,
    s: usize,
    a: Vec<T>,
    dt: T,
    base: Vec<T>,
    fluxes: Vec<FluxRef<T>>,
    evals: AtomicUsize,
}

impl<T: Real> IrkStageResidual<T> {
    pub fn new(tableau: &ButcherTableau<T>, u_n: &StateField<T>, dt: T, fluxes: Vec<FluxRef<T>>) -> Result<Self> {
        let grid = *u_n.grid();
        let m = u_n.components();
        check_fluxes(&grid, m, &fluxes, dt)?;
        let s = tableau.stages();
        let mut base = Vec::with_capacity(u_n.values().len() * s);
        for cell in u_n.values().chunks_exact(m) {
            for _ in 0..s {
                base.extend_from_slice(cell);
            }
        }
        Ok(Self { grid, m, s, a: tableau.a_matrix().to_vec(), dt, base, fluxes, evals: AtomicUsize::new(0) })
    }

    pub fn stages(&self) -> usize {
        self.s
    }

    pub fn components(&self) -> usize {
        self.m
    }
}

impl<T: Real> ConservativeResidual<T> for IrkStageResidual<T> {
    fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    fn block_size(&self) -> usize {
        self.s * self.m
    }
    fn dt(&self) -> T {
        self.dt
    }
    fn base(&self) -> &[T] {
        &self.base
    }
    fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    fn face_fluxes(&self, v: &[T], out: &mut FaceFluxes<T>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        let (s, m) = (self.s, self.m);
        for (d, flux) in self.fluxes.iter().enumerate() {
            fill_direction(&self.grid, d, s * m, v, &mut out.dirs[d], |l, r, o| {
                let mut stage = vec![T::zero(); s * m];
                for q in 0..s {
                    flux.evaluate(&l[q * m..(q + 1) * m], &r[q * m..(q + 1) * m], &mut stage[q * m..(q + 1) * m])?;
                }
                for j in 0..s {
                    for k in 0..m {
                        o[j * m + k] = (0..s).map(|q| self.a[j * s + q] * stage[q * m + k]).sum();
                    }
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    fn face_derivatives(&self, v: &[T]) -> Result<FaceDerivatives<T>> {
        let (s, m) = (self.s, self.m);
        let b = s * m;
        let mut fd = FaceDerivatives::zeros(&self.grid, b);
        let (mut dl, mut dr) = (vec![T::zero(); m * m], vec![T::zero(); m * m]);
        for (d, flux) in self.fluxes.iter().enumerate() {
            let sd = SplitDerivative::new(flux);
            for c in 0..self.grid.n_cells() {
                let r = self.grid.neighbor(c, d, true);
                let (vl, vr) = (&v[c * b..(c + 1) * b], &v[r * b..(r + 1) * b]);
                let (left, right) = (&mut fd.left[d][c * b * b..(c + 1) * b * b], &mut fd.right[d][c * b * b..(c + 1) * b * b]);
                for q in 0..s {
                    sd.blocks(&vl[q * m..(q + 1) * m], &vr[q * m..(q + 1) * m], &mut dl, &mut dr).map_err(|e| e.at_cell(c))?;
                    for j in 0..s {
                        let ajq = self.a[j * s + q];
                        for row in 0..m {
                            for col in 0..m {
                                let at = (j * m + row) * b + q * m + col;
                                left[at] = ajq * dl[row * m + col];
                                right[at] = ajq * dr[row * m + col];
                            }
                        }
                    }
                }
            }
        }
        Ok(fd)
    }
}

/// Step `ε = 1e-7/‖w‖` (grid-weighted L2 norm) for finite-difference
/// Jacobian actions.
pub fn fd_epsilon<T: Real>(grid: &Grid<T>, w: &[T]) -> Result<T> {
    let norm = weighted_norm(grid, w);
    if norm == T::zero() {
        return Err(Error::ZeroDirection);
    }
    Ok(T::lit(1e-7) / norm)
}

/// `(g(u + εw) − g(u))/ε` with `ε = 1e-7/‖w‖`.
pub fn fd_jacobian_action<T: Real>(residual: &dyn ConservativeResidual<T>, u: &[T], w: &[T]) -> Result<Vec<T>> {
    let eps = fd_epsilon(residual.grid(), w)?;
    let g0 = residual.evaluate(u)?;
    let shifted: Vec<T> = u.iter().zip(w).map(|(&a, &b)| a + eps * b).collect();
    let g1 = residual.evaluate(&shifted)?;
    Ok(g1.iter().zip(&g0).map(|(&a, &b)| (a - b) / eps).collect())
}

/// Matrix-free Jacobian of a conservative residual at a fixed state.
///
/// The action is `w/Δt + div((F(v + εw) − F(v))/ε)`: only the interface
/// fluxes are differenced and the time term is applied exactly, so the
/// column sums of the operator telescope like those of `g`. Each nonzero
/// action costs one evaluation of the space discretization.
pub struct FdJacobian<'a, T: Real> {
    residual: &'a dyn ConservativeResidual<T>,
    v: Vec<T>,
    faces: FaceFluxes<T>,
}

impl<'a, T: Real> FdJacobian<'a, T> {
    /// Reuses interface fluxes already computed at `v`.
    pub fn with_faces(residual: &'a dyn ConservativeResidual<T>, v: Vec<T>, faces: FaceFluxes<T>) -> Self {
        Self { residual, v, faces }
    }

    pub fn new(residual: &'a dyn ConservativeResidual<T>, v: Vec<T>) -> Result<Self> {
        let mut faces = residual.new_faces();
        residual.face_fluxes(&v, &mut faces)?;
        Ok(Self { residual, v, faces })
    }
}

impl<T: Real> LinearOperator<T> for FdJacobian<'_, T> {
    fn dim(&self) -> usize {
        self.v.len()
    }

    fn apply(&self, w: &[T], out: &mut [T]) -> Result<()> {
        let inv_dt = T::one() / self.residual.dt();
        for (o, &x) in out.iter_mut().zip(w) {
            *o = x * inv_dt;
        }
        if w.iter().all(|&x| x == T::zero()) {
            return Ok(());
        }
        let eps = fd_epsilon(self.residual.grid(), w)?;
        let shifted: Vec<T> = self.v.iter().zip(w).map(|(&a, &b)| a + eps * b).collect();
        let mut diff = self.residual.new_faces();
        self.residual.face_fluxes(&shifted, &mut diff)?;
        diff.add_scaled(-T::one(), &self.faces);
        diff.scale(T::one() / eps);
        add_divergence(self.residual.grid(), &diff, out);
        Ok(())
    }
}

/// Block Jacobian of a conservative residual on a periodic grid: one
/// diagonal block per cell plus one block per cell and direction coupling it
/// to each neighbour. In 1D this is the periodic block-tridiagonal matrix.
#[derive(Clone, Debug)]
pub struct BlockStencilJacobian<T> {
    grid: Grid<T>,
    block: usize,
    diag: Vec<T>,
    /// Coupling of row cell `c` to `left_d(c)`, per direction.
    lower: Vec<Vec<T>>,
    /// Coupling of row cell `c` to `right_d(c)`, per direction.
    upper: Vec<Vec<T>>,
}

pub type BlockTridiagonalJacobian<T> = BlockStencilJacobian<T>;

impl<T: Real> BlockStencilJacobian<T> {
    /// Assembles `I/Δt + div(∂F)` from per-face derivative blocks.
    pub fn from_face_derivatives(grid: &Grid<T>, dt: T, fd: &FaceDerivatives<T>) -> Self {
        let b = fd.block;
        let bb = b * b;
        let n = grid.n_cells();
        let mut diag = vec![T::zero(); n * bb];
        let mut lower = vec![vec![T::zero(); n * bb]; grid.dims()];
        let mut upper = vec![vec![T::zero(); n * bb]; grid.dims()];
        let inv_dt = T::one() / dt;
        for c in 0..n {
            for k in 0..b {
                diag[c * bb + k * b + k] = inv_dt;
            }
        }
        for d in 0..grid.dims() {
            let inv_h = T::one() / grid.spacing(d);
            for c in 0..n {
                let l = grid.neighbor(c, d, false);
                for e in 0..bb {
                    // face owned by c (high side of c): +F/h in row c
                    // face owned by l (low side of c): −F/h in row c
                    diag[c * bb + e] += (fd.left[d][c * bb + e] - fd.right[d][l * bb + e]) * inv_h;
                    upper[d][c * bb + e] = fd.right[d][c * bb + e] * inv_h;
                    lower[d][c * bb + e] = -fd.left[d][l * bb + e] * inv_h;
                }
            }
        }
        Self { grid: *grid, block: b, diag, lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.grid.n_cells() * self.block
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// Diagonal, lower and upper blocks of cell `c` in direction `dir`.
    pub fn blocks(&self, c: usize, dir: usize) -> (&[T], &[T], &[T]) {
        let bb = self.block * self.block;
        let r = c * bb..(c + 1) * bb;
        (&self.diag[r.clone()], &self.lower[dir][r.clone()], &self.upper[dir][r])
    }

    fn for_each_entry(&self, mut f: impl FnMut(usize, usize, T)) {
        let b = self.block;
        let bb = b * b;
        for c in 0..self.grid.n_cells() {
            let mut emit = |col_cell: usize, blk: &[T]| {
                for i in 0..b {
                    for j in 0..b {
                        f(c * b + i, col_cell * b + j, blk[i * b + j]);
                    }
                }
            };
            emit(c, &self.diag[c * bb..(c + 1) * bb]);
            for d in 0..self.grid.dims() {
                emit(self.grid.neighbor(c, d, false), &self.lower[d][c * bb..(c + 1) * bb]);
                emit(self.grid.neighbor(c, d, true), &self.upper[d][c * bb..(c + 1) * bb]);
            }
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.dim()];
        self.for_each_entry(|i, j, a| y[i] += a * x[j]);
        y
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.dim(), self.dim());
        self.for_each_entry(|i, j, a| m[(i, j)] += a);
        m
    }

    /// LU factorization in banded storage after a folded cell ordering.
    pub fn factor(&self) -> Result<BlockStencilLu<T>> {
        let ordering = FoldedOrdering::new(&self.grid);
        let b = self.block;
        let mut reach = 0usize;
        for c in 0..self.grid.n_cells() {
            for d in 0..self.grid.dims() {
                for fwd in [false, true] {
                    let nb = self.grid.neighbor(c, d, fwd);
                    reach = reach.max(ordering.position[c].abs_diff(ordering.position[nb]));
                }
            }
        }
        let width = reach * b + b - 1;
        let mut band = BandMatrix::zeros(self.dim(), width, width);
        self.for_each_entry(|i, j, a| {
            if a != T::zero() {
                band.add(ordering.row(i, b), ordering.row(j, b), a);
            }
        });
        Ok(BlockStencilLu { lu: band.factor()?, ordering, block: b })
    }

    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        self.factor()?.solve(rhs)
    }
}

/// Cell ordering that keeps periodic neighbours close: along the folded
/// axis cells are visited `0, n−1, 1, n−2, …`.
#[derive(Clone, Debug)]
struct FoldedOrdering {
    position: Vec<usize>,
}

fn fold(n: usize) -> Vec<usize> {
    // position of index i in the sequence 0, n-1, 1, n-2, ...
    (0..n).map(|i| if 2 * i < n { 2 * i } else { 2 * (n - 1 - i) + 1 }).collect()
}

impl FoldedOrdering {
    fn new<T: Real>(grid: &Grid<T>) -> Self {
        let position = match grid {
            Grid::OneD(g) => fold(g.n),
            Grid::TwoD(g) => {
                let mut pos = vec![0; g.nx * g.ny];
                if g.nx >= g.ny {
                    let fx = fold(g.nx);
                    for j in 0..g.ny {
                        for i in 0..g.nx {
                            pos[j * g.nx + i] = fx[i] * g.ny + j;
                        }
                    }
                } else {
                    let fy = fold(g.ny);
                    for j in 0..g.ny {
                        for i in 0..g.nx {
                            pos[j * g.nx + i] = fy[j] * g.nx + i;
                        }
                    }
                }
                pos
            }
        };
        Self { position }
    }

    fn row(&self, i: usize, b: usize) -> usize {
        self.position[i / b] * b + i % b
    }
}

pub struct BlockStencilLu<T> {
    lu: BandLu<T>,
    ordering: FoldedOrdering,
    block: usize,
}

impl<T: Real> BlockStencilLu<T> {
    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        let b = self.block;
        let mut permuted = vec![T::zero(); rhs.len()];
        for (i, &r) in rhs.iter().enumerate() {
            permuted[self.ordering.row(i, b)] = r;
        }
        let y = self.lu.solve(&permuted)?;
        Ok((0..rhs.len()).map(|i| y[self.ordering.row(i, b)]).collect())
    }
}

impl<T: Real> LinearOperator<T> for BlockStencilJacobian<T> {
    fn dim(&self) -> usize {
        BlockStencilJacobian::dim(self)
    }
    fn apply(&self, x: &[T], out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&self.matvec(x));
        Ok(())
    }
}

/// Analytic Jacobian `g'(v)` of a residual.
pub fn analytic_jacobian<T: Real>(residual: &dyn ConservativeResidual<T>, v: &[T]) -> Result<BlockStencilJacobian<T>> {
    let fd = residual.face_derivatives(v)?;
    Ok(BlockStencilJacobian::from_face_derivatives(residual.grid(), residual.dt(), &fd))
}

/// Finite-difference Jacobian assembled with a neighbour coloring of the
/// cells: cells of one color never share a face, so one face-flux
/// evaluation per color and component recovers every face derivative
/// touching that color.
pub fn fd_assembled_jacobian<T: Real>(residual: &dyn ConservativeResidual<T>, v: &[T]) -> Result<BlockStencilJacobian<T>> {
    let grid = *residual.grid();
    let b = residual.block_size();
    let bb = b * b;
    let colors = neighbor_coloring(&grid);
    let n_colors = colors.iter().max().map_or(0, |c| c + 1);
    let mut base = residual.new_faces();
    residual.face_fluxes(v, &mut base)?;
    let scale = T::one() + crate::scalar::norm_inf(v);
    let h = T::lit(1e-7) * scale;
    let mut fd = FaceDerivatives::zeros(&grid, b);
    let mut perturbed = residual.new_faces();
    let mut probe = v.to_vec();
    for color in 0..n_colors {
        for k in 0..b {
            for (c, &col) in colors.iter().enumerate() {
                if col == color {
                    probe[c * b + k] = v[c * b + k] + h;
                }
            }
            residual.face_fluxes(&probe, &mut perturbed)?;
            probe.copy_from_slice(v);
            for d in 0..grid.dims() {
                for c in 0..grid.n_cells() {
                    let r = grid.neighbor(c, d, true);
                    let target = if colors[c] == color {
                        &mut fd.left[d]
                    } else if colors[r] == color {
                        &mut fd.right[d]
                    } else {
                        continue;
                    };
                    for row in 0..b {
                        let diff = (perturbed.dirs[d][c * b + row] - base.dirs[d][c * b + row]) / h;
                        target[c * bb + row * b + k] = diff;
                    }
                }
            }
        }
    }
    Ok(BlockStencilJacobian::from_face_derivatives(&grid, residual.dt(), &fd))
}

/// Greedy coloring where face-sharing cells get different colors.
fn neighbor_coloring<T: Real>(grid: &Grid<T>) -> Vec<usize> {
    let n = grid.n_cells();
    let mut colors = vec![usize::MAX; n];
    for c in 0..n {
        let mut used = Vec::new();
        for d in 0..grid.dims() {
            for fwd in [false, true] {
                let nb = grid.neighbor(c, d, fwd);
                if colors[nb] != usize::MAX {
                    used.push(colors[nb]);
                }
            }
        }
        colors[c] = (0..).find(|k| !used.contains(k)).unwrap();
    }
    colors
}

/// Direct solve of a block Jacobian system.
pub fn solve_block_tridiagonal<T: Real>(jac: &BlockStencilJacobian<T>, rhs: &[T]) -> Result<Vec<T>> {
    jac.solve(rhs)
}

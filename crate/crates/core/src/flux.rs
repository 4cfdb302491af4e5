//! Bivariate interface fluxes `f̂(θ, φ)` and their partial derivatives.
//!
//! `θ` is the state left of the interface and `φ` the state to its right.
//! Derivative matrices are `m × m`, row-major, `out[l * m + k] = ∂f̂_l / ∂x_k`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm2, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxSymmetry {
    Symmetric,
    Antisymmetric,
    General,
}

impl FluxSymmetry {
    /// `+1` for symmetric, `-1` for antisymmetric parts.
    fn sign<T: Real>(self) -> Option<T> {
        match self {
            FluxSymmetry::Symmetric => Some(T::one()),
            FluxSymmetry::Antisymmetric => Some(-T::one()),
            FluxSymmetry::General => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    X,
    Y,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::X => 0,
            Direction::Y => 1,
        }
    }
}

pub trait NumericalFlux<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn components(&self) -> usize;

    fn symmetry(&self) -> FluxSymmetry;

    /// The physical flux `f(u)` this interface flux is consistent with.
    /// Antisymmetric parts report the zero flux.
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()>;

    fn evaluate(&self, left: &[T], right: &[T], out: &mut [T]) -> Result<()>;

    /// `∂f̂/∂φ` at `(left, right)`.
    fn d_right(&self, left: &[T], right: &[T], out: &mut [T]) -> Result<()>;

    /// `∂f̂/∂θ` at `(left, right)`. Symmetric and antisymmetric fluxes get it
    /// from `d_right` with the arguments swapped; general fluxes must override.
    fn d_left(&self, left: &[T], right: &[T], out: &mut [T]) -> Result<()> {
        let sign: T = self
            .symmetry()
            .sign()
            .ok_or_else(|| Error::Unsupported(format!("{} does not provide d_left", self.name())))?;
        self.d_right(right, left, out)?;
        if sign < T::zero() {
            out.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(())
    }
}

pub type FluxRef<T> = Arc<dyn NumericalFlux<T>>;

pub const FLUX_NAMES: [&str; 6] = [
    "advection-central",
    "advection-upwind",
    "burgers-central",
    "burgers-lf",
    "euler-central",
    "euler-chandrashekar",
];

/// Parameters a catalog flux may need.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxParams<T> {
    pub advection_speed: T,
    pub gamma: T,
    /// Dissipation coefficient of the Lax-Friedrichs flux.
    pub lf_lambda: T,
}

impl<T: Real> Default for FluxParams<T> {
    fn default() -> Self {
        Self { advection_speed: T::one(), gamma: T::lit(1.4), lf_lambda: T::one() }
    }
}

/// Looks up a catalog flux by name. Euler fluxes are built for `direction`;
/// scalar fluxes ignore it.
pub fn catalog_flux<T: Real>(name: &str, params: FluxParams<T>, direction: Direction) -> Result<FluxRef<T>> {
    let a = params.advection_speed;
    Ok(match name {
        "advection-central" => Arc::new(AdvectionCentral { a }),
        "advection-upwind" => Arc::new(AdvectionUpwind { a }),
        "burgers-central" => Arc::new(BurgersCentral),
        "burgers-lf" => Arc::new(BurgersLaxFriedrichs { lambda: params.lf_lambda }),
        "euler-central" => Arc::new(EulerCentral { direction, gamma: params.gamma }),
        "euler-chandrashekar" => Arc::new(Chandrashekar { direction, gamma: params.gamma }),
        other => return Err(Error::UnknownFlux(other.to_string())),
    })
}

/// Number of conserved components a catalog flux works on.
pub fn catalog_components(name: &str) -> Result<usize> {
    match name {
        "advection-central" | "advection-upwind" | "burgers-central" | "burgers-lf" => Ok(1),
        "euler-central" | "euler-chandrashekar" => Ok(4),
        other => Err(Error::UnknownFlux(other.to_string())),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdvectionCentral<T> {
    pub a: T,
}

impl<T: Real> NumericalFlux<T> for AdvectionCentral<T> {
    fn name(&self) -> &str {
        "advection-central"
    }
    fn components(&self) -> usize {
        1
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Symmetric
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out[0] = self.a * u[0];
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        out[0] = self.a * (l[0] + r[0]) * T::lit(0.5);
        Ok(())
    }
    fn d_right(&self, _: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        out[0] = self.a * T::lit(0.5);
        Ok(())
    }
}

/// `a(θ+φ)/2 + |a|(θ−φ)/2`.
#[derive(Clone, Copy, Debug)]
pub struct AdvectionUpwind<T> {
    pub a: T,
}

impl<T: Real> NumericalFlux<T> for AdvectionUpwind<T> {
    fn name(&self) -> &str {
        "advection-upwind"
    }
    fn components(&self) -> usize {
        1
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::General
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out[0] = self.a * u[0];
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let half = T::lit(0.5);
        out[0] = half * self.a * (l[0] + r[0]) + half * self.a.abs() * (l[0] - r[0]);
        Ok(())
    }
    fn d_right(&self, _: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * (self.a - self.a.abs());
        Ok(())
    }
    fn d_left(&self, _: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * (self.a + self.a.abs());
        Ok(())
    }
}

/// `(θ² + φ²)/4`.
#[derive(Clone, Copy, Debug)]
pub struct BurgersCentral;

impl<T: Real> NumericalFlux<T> for BurgersCentral {
    fn name(&self) -> &str {
        "burgers-central"
    }
    fn components(&self) -> usize {
        1
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Symmetric
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * u[0] * u[0];
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.25) * (l[0] * l[0] + r[0] * r[0]);
        Ok(())
    }
    fn d_right(&self, _: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * r[0];
        Ok(())
    }
}

/// `(θ² + φ²)/4 − λ(φ − θ)/2` with a fixed global `λ`.
#[derive(Clone, Copy, Debug)]
pub struct BurgersLaxFriedrichs<T> {
    pub lambda: T,
}

impl<T: Real> NumericalFlux<T> for BurgersLaxFriedrichs<T> {
    fn name(&self) -> &str {
        "burgers-lf"
    }
    fn components(&self) -> usize {
        1
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::General
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * u[0] * u[0];
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.25) * (l[0] * l[0] + r[0] * r[0]) - T::lit(0.5) * self.lambda * (r[0] - l[0]);
        Ok(())
    }
    fn d_right(&self, _: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * (r[0] - self.lambda);
        Ok(())
    }
    fn d_left(&self, l: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::lit(0.5) * (l[0] + self.lambda);
        Ok(())
    }
}

/// Linear system flux `A(θ+φ)/2 − λ(φ−θ)/2`, e.g. linearised shallow water.
#[derive(Clone, Debug)]
pub struct LinearSystemFlux<T> {
    m: usize,
    a: Vec<T>,
    lambda: T,
}

impl<T: Real> LinearSystemFlux<T> {
    pub fn new(m: usize, a: Vec<T>, lambda: T) -> Result<Self> {
        if a.len() != m * m {
            return Err(Error::DimensionMismatch { expected: m * m, got: a.len() });
        }
        Ok(Self { m, a, lambda })
    }
}

impl<T: Real> NumericalFlux<T> for LinearSystemFlux<T> {
    fn name(&self) -> &str {
        "linear-system"
    }
    fn components(&self) -> usize {
        self.m
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::General
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        for l in 0..self.m {
            out[l] = (0..self.m).map(|k| self.a[l * self.m + k] * u[k]).sum();
        }
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let half = T::lit(0.5);
        for row in 0..self.m {
            let avg: T = (0..self.m).map(|k| self.a[row * self.m + k] * (l[k] + r[k])).sum();
            out[row] = half * avg - half * self.lambda * (r[row] - l[row]);
        }
        Ok(())
    }
    fn d_right(&self, _: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        self.derivative(-T::one(), out);
        Ok(())
    }
    fn d_left(&self, _: &[T], _: &[T], out: &mut [T]) -> Result<()> {
        self.derivative(T::one(), out);
        Ok(())
    }
}

impl<T: Real> LinearSystemFlux<T> {
    fn derivative(&self, diss_sign: T, out: &mut [T]) {
        let half = T::lit(0.5);
        for (o, &a) in out.iter_mut().zip(&self.a) {
            *o = half * a;
        }
        for d in 0..self.m {
            out[d * self.m + d] += diss_sign * half * self.lambda;
        }
    }
}

/// Symmetric part `(f̂(θ,φ) + f̂(φ,θ))/2` of a flux.
pub struct SymmetricPart<T: Real> {
    inner: FluxRef<T>,
    name: String,
}

/// Antisymmetric part `(f̂(θ,φ) − f̂(φ,θ))/2` of a flux.
pub struct AntisymmetricPart<T: Real> {
    inner: FluxRef<T>,
    name: String,
}

/// Splits a flux into its symmetric and antisymmetric parts.
pub fn split<T: Real>(flux: FluxRef<T>) -> (FluxRef<T>, FluxRef<T>) {
    let sym = SymmetricPart { name: format!("{}+", flux.name()), inner: flux.clone() };
    let anti = AntisymmetricPart { name: format!("{}-", flux.name()), inner: flux };
    (Arc::new(sym), Arc::new(anti))
}

fn half_combine<T: Real>(a: &mut [T], b: &[T], sign: T) {
    let half = T::lit(0.5);
    for (x, &y) in a.iter_mut().zip(b) {
        *x = half * (*x + sign * y);
    }
}

impl<T: Real> NumericalFlux<T> for SymmetricPart<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Symmetric
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        self.inner.physical(u, out)
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let mut swapped = vec![T::zero(); out.len()];
        self.inner.evaluate(l, r, out)?;
        self.inner.evaluate(r, l, &mut swapped)?;
        half_combine(out, &swapped, T::one());
        Ok(())
    }
    fn d_right(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let mut other = vec![T::zero(); out.len()];
        self.inner.d_right(l, r, out)?;
        self.inner.d_left(r, l, &mut other)?;
        half_combine(out, &other, T::one());
        Ok(())
    }
}

impl<T: Real> NumericalFlux<T> for AntisymmetricPart<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Antisymmetric
    }
    fn physical(&self, _: &[T], out: &mut [T]) -> Result<()> {
        out.iter_mut().for_each(|x| *x = T::zero());
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let mut swapped = vec![T::zero(); out.len()];
        self.inner.evaluate(l, r, out)?;
        self.inner.evaluate(r, l, &mut swapped)?;
        half_combine(out, &swapped, -T::one());
        Ok(())
    }
    fn d_right(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let mut other = vec![T::zero(); out.len()];
        self.inner.d_right(l, r, out)?;
        self.inner.d_left(r, l, &mut other)?;
        half_combine(out, &other, -T::one());
        Ok(())
    }
}

/// Primitive variables of a 2D Euler state.
#[derive(Clone, Copy, Debug)]
struct Primitive<T> {
    rho: T,
    vel: [T; 2],
    p: T,
}

fn primitive<T: Real>(u: &[T], gamma: T) -> Result<Primitive<T>> {
    let rho = u[0];
    if !(rho > T::zero()) {
        return Err(Error::NonphysicalState { cell: 0, reason: format!("density {}", rho) });
    }
    let vel = [u[1] / rho, u[2] / rho];
    let kinetic = T::lit(0.5) * rho * (vel[0] * vel[0] + vel[1] * vel[1]);
    let p = (gamma - T::one()) * (u[3] - kinetic);
    if !(p > T::zero()) {
        return Err(Error::NonphysicalState { cell: 0, reason: format!("pressure {}", p) });
    }
    Ok(Primitive { rho, vel, p })
}

/// Derivatives of primitives with respect to the conservative variables.
struct PrimitiveGradient<T> {
    rho: [T; 4],
    vel: [[T; 4]; 2],
    p: [T; 4],
}

fn primitive_gradient<T: Real>(w: &Primitive<T>, gamma: T) -> PrimitiveGradient<T> {
    let z = T::zero();
    let inv = T::one() / w.rho;
    let [u, v] = w.vel;
    let g1 = gamma - T::one();
    PrimitiveGradient {
        rho: [T::one(), z, z, z],
        vel: [[-u * inv, inv, z, z], [-v * inv, z, inv, z]],
        p: [g1 * T::lit(0.5) * (u * u + v * v), -g1 * u, -g1 * v, g1],
    }
}

/// Physical flux of the 2D Euler equations in `direction`.
pub fn euler2d_physical_flux<T: Real>(state: &[T], direction: Direction, gamma: T) -> Result<[T; 4]> {
    let w = primitive(state, gamma)?;
    let n = direction.index();
    let un = w.vel[n];
    let mut f = [state[0] * un, state[1] * un, state[2] * un, (state[3] + w.p) * un];
    f[1 + n] += w.p;
    Ok(f)
}

/// Jacobian `∂f/∂u` of the 2D Euler flux in `direction`, row-major 4×4.
fn euler2d_flux_jacobian<T: Real>(state: &[T], direction: Direction, gamma: T) -> Result<[T; 16]> {
    let w = primitive(state, gamma)?;
    let g = primitive_gradient(&w, gamma);
    let n = direction.index();
    let un = w.vel[n];
    let dun = g.vel[n];
    let mut jac = [T::zero(); 16];
    for k in 0..4 {
        // f_l = u_l * un for l < 3, plus p on the normal momentum row
        for l in 0..3 {
            let e = if l == k { T::one() } else { T::zero() };
            jac[l * 4 + k] = e * un + state[l] * dun[k];
        }
        jac[(1 + n) * 4 + k] += g.p[k];
        let e3 = if k == 3 { T::one() } else { T::zero() };
        jac[12 + k] = (e3 + g.p[k]) * un + (state[3] + w.p) * dun[k];
    }
    Ok(jac)
}

/// Central flux `(f(θ) + f(φ))/2` for the 2D Euler equations.
#[derive(Clone, Copy, Debug)]
pub struct EulerCentral<T> {
    pub direction: Direction,
    pub gamma: T,
}

impl<T: Real> NumericalFlux<T> for EulerCentral<T> {
    fn name(&self) -> &str {
        "euler-central"
    }
    fn components(&self) -> usize {
        4
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Symmetric
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&euler2d_physical_flux(u, self.direction, self.gamma)?);
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let fl = euler2d_physical_flux(l, self.direction, self.gamma)?;
        let fr = euler2d_physical_flux(r, self.direction, self.gamma)?;
        for k in 0..4 {
            out[k] = T::lit(0.5) * (fl[k] + fr[k]);
        }
        Ok(())
    }
    fn d_right(&self, _: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let jac = euler2d_flux_jacobian(r, self.direction, self.gamma)?;
        for (o, j) in out.iter_mut().zip(jac) {
            *o = T::lit(0.5) * j;
        }
        Ok(())
    }
}

/// Logarithmic mean `(b − a)/(ln b − ln a)` with a series fallback near `a = b`.
pub fn log_mean<T: Real>(a: T, b: T) -> T {
    let f = (b - a) / (a + b);
    if f.abs() < T::lit(1e-4) {
        (a + b) / (T::lit(2.0) * log_mean_series(f * f))
    } else {
        (b - a) / (b / a).ln()
    }
}

/// `atanh(f)/f` as a series in `u = f²`.
fn log_mean_series<T: Real>(u: T) -> T {
    T::one() + u / T::lit(3.0) + u * u / T::lit(5.0) + u * u * u / T::lit(7.0)
}

/// `∂/∂b` of [`log_mean`].
pub fn log_mean_d_right<T: Real>(a: T, b: T) -> T {
    let f = (b - a) / (a + b);
    if f.abs() < T::lit(1e-4) {
        let u = f * f;
        let big_f = log_mean_series(u);
        let big_f_prime = T::one() / T::lit(3.0) + T::lit(2.0) * u / T::lit(5.0) + T::lit(3.0) * u * u / T::lit(7.0);
        T::one() / (T::lit(2.0) * big_f) - big_f_prime * f * (T::one() - f) / (big_f * big_f)
    } else {
        let ln = (b / a).ln();
        (ln - (b - a) / b) / (ln * ln)
    }
}

/// Entropy conservative, kinetic energy preserving flux of Chandrashekar.
#[derive(Clone, Copy, Debug)]
pub struct Chandrashekar<T> {
    pub direction: Direction,
    pub gamma: T,
}

struct ChandrashekarMeans<T> {
    rho_ln: T,
    beta_ln: T,
    vel: [T; 2],
    rho_avg: T,
    beta_avg: T,
    q_avg: T,
}

impl<T: Real> Chandrashekar<T> {
    fn means(&self, l: &Primitive<T>, r: &Primitive<T>) -> ChandrashekarMeans<T> {
        let half = T::lit(0.5);
        let beta_l = l.rho / (T::lit(2.0) * l.p);
        let beta_r = r.rho / (T::lit(2.0) * r.p);
        let speed2 = |w: &Primitive<T>| w.vel[0] * w.vel[0] + w.vel[1] * w.vel[1];
        ChandrashekarMeans {
            rho_ln: log_mean(l.rho, r.rho),
            beta_ln: log_mean(beta_l, beta_r),
            vel: [half * (l.vel[0] + r.vel[0]), half * (l.vel[1] + r.vel[1])],
            rho_avg: half * (l.rho + r.rho),
            beta_avg: half * (beta_l + beta_r),
            q_avg: half * (speed2(l) + speed2(r)),
        }
    }

    /// Flux from means; returns `(F, K)` where `K` is the energy coefficient.
    fn flux_from_means(&self, mm: &ChandrashekarMeans<T>) -> ([T; 4], T) {
        let n = self.direction.index();
        let p_hat = mm.rho_avg / (T::lit(2.0) * mm.beta_avg);
        let f_rho = mm.rho_ln * mm.vel[n];
        let mut f = [f_rho, mm.vel[0] * f_rho, mm.vel[1] * f_rho, T::zero()];
        f[1 + n] += p_hat;
        let k = T::one() / (T::lit(2.0) * (self.gamma - T::one()) * mm.beta_ln) - T::lit(0.5) * mm.q_avg;
        f[3] = f_rho * k + mm.vel[0] * f[1] + mm.vel[1] * f[2];
        (f, k)
    }
}

impl<T: Real> NumericalFlux<T> for Chandrashekar<T> {
    fn name(&self) -> &str {
        "euler-chandrashekar"
    }
    fn components(&self) -> usize {
        4
    }
    fn symmetry(&self) -> FluxSymmetry {
        FluxSymmetry::Symmetric
    }
    fn physical(&self, u: &[T], out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&euler2d_physical_flux(u, self.direction, self.gamma)?);
        Ok(())
    }
    fn evaluate(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let wl = primitive(l, self.gamma)?;
        let wr = primitive(r, self.gamma)?;
        let (f, _) = self.flux_from_means(&self.means(&wl, &wr));
        out.copy_from_slice(&f);
        Ok(())
    }

    fn d_right(&self, l: &[T], r: &[T], out: &mut [T]) -> Result<()> {
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let n = self.direction.index();
        let wl = primitive(l, self.gamma)?;
        let wr = primitive(r, self.gamma)?;
        let mm = self.means(&wl, &wr);
        let (f, k_energy) = self.flux_from_means(&mm);
        let g = primitive_gradient(&wr, self.gamma);

        let beta_l = wl.rho / (two * wl.p);
        let beta_r = wr.rho / (two * wr.p);
        let dl_rho = log_mean_d_right(wl.rho, wr.rho);
        let dl_beta = log_mean_d_right(beta_l, beta_r);
        let p_hat_den = two * mm.beta_avg;

        for k in 0..4 {
            let d_beta_r = g.rho[k] / (two * wr.p) - wr.rho * g.p[k] / (two * wr.p * wr.p);
            let d_rho_ln = dl_rho * g.rho[k];
            let d_beta_ln = dl_beta * d_beta_r;
            let d_vel = [half * g.vel[0][k], half * g.vel[1][k]];
            let d_rho_avg = half * g.rho[k];
            let d_beta_avg = half * d_beta_r;
            let d_q = wr.vel[0] * g.vel[0][k] + wr.vel[1] * g.vel[1][k];

            let d_p_hat = d_rho_avg / p_hat_den - mm.rho_avg * two * d_beta_avg / (p_hat_den * p_hat_den);
            let d_f_rho = d_rho_ln * mm.vel[n] + mm.rho_ln * d_vel[n];
            let mut d_mom = [d_vel[0] * f[0] + mm.vel[0] * d_f_rho, d_vel[1] * f[0] + mm.vel[1] * d_f_rho];
            d_mom[n] += d_p_hat;
            let d_k = -d_beta_ln / (two * (self.gamma - T::one()) * mm.beta_ln * mm.beta_ln) - half * d_q;
            let d_energy = d_f_rho * k_energy
                + f[0] * d_k
                + d_vel[0] * f[1]
                + mm.vel[0] * d_mom[0]
                + d_vel[1] * f[2]
                + mm.vel[1] * d_mom[1];

            out[k] = d_f_rho;
            out[4 + k] = d_mom[0];
            out[8 + k] = d_mom[1];
            out[12 + k] = d_energy;
        }
        Ok(())
    }
}

/// Central finite-difference `∂f̂/∂φ` with step `1e-6·max(1, ‖φ‖)`.
pub fn fd_partial_derivative<T: Real>(flux: &dyn NumericalFlux<T>, left: &[T], right: &[T]) -> Result<Vec<T>> {
    let m = flux.components();
    let h = T::lit(1e-6) * T::one().max(norm2(right));
    let mut jac = vec![T::zero(); m * m];
    let (mut fp, mut fm) = (vec![T::zero(); m], vec![T::zero(); m]);
    let mut probe = right.to_vec();
    for k in 0..m {
        probe[k] = right[k] + h;
        flux.evaluate(left, &probe, &mut fp)?;
        probe[k] = right[k] - h;
        flux.evaluate(left, &probe, &mut fm)?;
        probe[k] = right[k];
        for l in 0..m {
            jac[l * m + k] = (fp[l] - fm[l]) / (T::lit(2.0) * h);
        }
    }
    Ok(jac)
}

/// Central finite-difference `∂f̂/∂θ`, same step rule as [`fd_partial_derivative`].
pub fn fd_partial_derivative_left<T: Real>(flux: &dyn NumericalFlux<T>, left: &[T], right: &[T]) -> Result<Vec<T>> {
    let m = flux.components();
    let h = T::lit(1e-6) * T::one().max(norm2(left));
    let mut jac = vec![T::zero(); m * m];
    let (mut fp, mut fm) = (vec![T::zero(); m], vec![T::zero(); m]);
    let mut probe = left.to_vec();
    for k in 0..m {
        probe[k] = left[k] + h;
        flux.evaluate(&probe, right, &mut fp)?;
        probe[k] = left[k] - h;
        flux.evaluate(&probe, right, &mut fm)?;
        probe[k] = left[k];
        for l in 0..m {
            jac[l * m + k] = (fp[l] - fm[l]) / (T::lit(2.0) * h);
        }
    }
    Ok(jac)
}

/// Conservative state from primitive `(ρ, u, v, p)`.
pub fn euler_conservative<T: Real>(rho: T, u: T, v: T, p: T, gamma: T) -> [T; 4] {
    [rho, rho * u, rho * v, p / (gamma - T::one()) + T::lit(0.5) * rho * (u * u + v * v)]
}

/// Largest characteristic speed `|u_n| + a` of a 2D Euler state.
pub fn euler_max_wave_speed<T: Real>(state: &[T], gamma: T) -> Result<T> {
    let w = primitive(state, gamma)?;
    let sound = (gamma * w.p / w.rho).sqrt();
    Ok(w.vel[0].abs().max(w.vel[1].abs()) + sound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GAMMA: f64 = 1.4;

    fn random_state(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        if m == 4 {
            let rho = rng.gen_range(0.5..2.0);
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            let p = rng.gen_range(0.5..2.0);
            euler_conservative(rho, u, v, p, GAMMA).to_vec()
        } else {
            vec![rng.gen_range(-2.0..2.0)]
        }
    }

    fn catalog() -> Vec<FluxRef<f64>> {
        let params = FluxParams { advection_speed: -0.7, gamma: GAMMA, lf_lambda: 1.3 };
        let mut all = Vec::new();
        for name in FLUX_NAMES {
            for dir in [Direction::X, Direction::Y] {
                all.push(catalog_flux(name, params, dir).unwrap());
            }
        }
        all.push(Arc::new(LinearSystemFlux::new(2, vec![0.0, 1.0, 2.0, 0.0], 1.5).unwrap()));
        all
    }

    #[test]
    fn every_catalog_flux_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for flux in catalog() {
            let m = flux.components();
            let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
            for _ in 0..100 {
                let u = if m == 2 { vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)] } else { random_state(&mut rng, m) };
                flux.evaluate(&u, &u, &mut a).unwrap();
                flux.physical(&u, &mut b).unwrap();
                for k in 0..m {
                    assert!((a[k] - b[k]).abs() <= 1e-12 * (1.0 + b[k].abs()), "{}: {:?} vs {:?}", flux.name(), a, b);
                }
            }
        }
    }

    #[test]
    fn split_reassembles_and_has_tagged_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for flux in catalog() {
            let m = flux.components();
            let (sym, anti) = split(flux.clone());
            assert_eq!(sym.symmetry(), FluxSymmetry::Symmetric);
            assert_eq!(anti.symmetry(), FluxSymmetry::Antisymmetric);
            let mut buf = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
            for _ in 0..100 {
                let gen = |rng: &mut ChaCha8Rng| if m == 2 { vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)] } else { random_state(rng, m) };
                let l = gen(&mut rng);
                let r = gen(&mut rng);
                let [full, s, a, s_swap, a_swap] = &mut buf;
                flux.evaluate(&l, &r, full).unwrap();
                sym.evaluate(&l, &r, s).unwrap();
                anti.evaluate(&l, &r, a).unwrap();
                sym.evaluate(&r, &l, s_swap).unwrap();
                anti.evaluate(&r, &l, a_swap).unwrap();
                for k in 0..m {
                    let scale = 1.0 + full[k].abs();
                    assert!((full[k] - s[k] - a[k]).abs() <= 1e-14 * scale);
                    assert!((s[k] - s_swap[k]).abs() <= 1e-14 * scale);
                    assert!((a[k] + a_swap[k]).abs() <= 1e-14 * scale);
                }
                anti.evaluate(&l, &l, a).unwrap();
                assert!(a.iter().all(|x| x.abs() <= 1e-14));
            }
        }
    }

    #[test]
    fn lax_friedrichs_antisymmetric_part() {
        let lf = BurgersLaxFriedrichs { lambda: 0.8 };
        let (_, anti) = split::<f64>(Arc::new(lf));
        let mut out = [0.0];
        anti.evaluate(&[0.3], &[1.1], &mut out).unwrap();
        assert!((out[0] - (-0.4 * (1.1 - 0.3))).abs() < 1e-15);
        let (_, anti_central) = split::<f64>(Arc::new(AdvectionCentral { a: 2.0 }));
        anti_central.evaluate(&[0.3], &[1.1], &mut out).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fluxes = catalog();
        let split_parts: Vec<FluxRef<f64>> = fluxes
            .iter()
            .flat_map(|f| {
                let (s, a) = split(f.clone());
                [s, a]
            })
            .collect();
        fluxes.extend(split_parts);
        for flux in fluxes {
            let m = flux.components();
            let mut jac = vec![0.0; m * m];
            for _ in 0..100 {
                let gen = |rng: &mut ChaCha8Rng| if m == 2 { vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)] } else { random_state(rng, m) };
                let l = gen(&mut rng);
                let r = gen(&mut rng);
                flux.d_right(&l, &r, &mut jac).unwrap();
                let fd = fd_partial_derivative(flux.as_ref(), &l, &r).unwrap();
                for (a, b) in jac.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6, "{} d_right: {a} vs {b}", flux.name());
                }
                flux.d_left(&l, &r, &mut jac).unwrap();
                let fd = fd_partial_derivative_left(flux.as_ref(), &l, &r).unwrap();
                for (a, b) in jac.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6, "{} d_left: {a} vs {b}", flux.name());
                }
            }
        }
    }

    #[test]
    fn chandrashekar_derivative_near_equal_states() {
        // exercises the series branch of the logarithmic mean
        let flux = Chandrashekar { direction: Direction::X, gamma: GAMMA };
        let l = euler_conservative(1.0, 0.3, -0.2, 1.0, GAMMA);
        let r = euler_conservative(1.0 + 1e-6, 0.3, -0.2, 1.0 - 1e-6, GAMMA);
        let mut jac = [0.0; 16];
        flux.d_right(&l, &r, &mut jac).unwrap();
        let fd = fd_partial_derivative(&flux, &l, &r).unwrap();
        for (a, b) in jac.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn simple_fd_examples() {
        let central = AdvectionCentral { a: 1.0f64 };
        let d = fd_partial_derivative(&central, &[0.2], &[0.7]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-9);
        let d = fd_partial_derivative::<f64>(&BurgersCentral, &[0.2], &[0.7]).unwrap();
        assert!((d[0] - 0.35).abs() < 1e-9);
    }

    #[test]
    fn log_mean_values() {
        assert!((log_mean(2.5f64, 2.5) - 2.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((log_mean(1.0, e) - (e - 1.0)).abs() < 1e-14);
        // series and closed form agree across the switch
        let a = 1.0;
        let b = 1.0 + 2.0001e-4;
        let closed = (b - a) / (b / a as f64).ln();
        assert!((log_mean(a, b) - closed).abs() < 1e-12);
        assert_eq!(log_mean(0.7, 1.9), log_mean(1.9, 0.7));
    }

    #[test]
    fn euler_physical_flux_examples() {
        let u = euler_conservative(1.0, 1.0, 0.0, 1.0, GAMMA);
        assert!((u[3] - 3.0).abs() < 1e-15);
        let f = euler2d_physical_flux(&u, Direction::X, GAMMA).unwrap();
        let expect = [1.0, 2.0, 0.0, 4.0];
        for k in 0..4 {
            assert!((f[k] - expect[k]).abs() < 1e-14);
        }
        let still = euler_conservative(1.3, 0.0, 0.0, 0.8, GAMMA);
        let f = euler2d_physical_flux(&still, Direction::X, GAMMA).unwrap();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.8).abs() < 1e-15);
        assert_eq!((f[2], f[3]), (0.0, 0.0));
    }

    #[test]
    fn euler_y_flux_mirrors_x_flux() {
        let u = euler_conservative(1.2, 0.4, -0.9, 0.7, GAMMA);
        let swapped = [u[0], u[2], u[1], u[3]];
        let fy = euler2d_physical_flux(&u, Direction::Y, GAMMA).unwrap();
        let fx = euler2d_physical_flux(&swapped, Direction::X, GAMMA).unwrap();
        assert!((fy[0] - fx[0]).abs() < 1e-15);
        assert!((fy[1] - fx[2]).abs() < 1e-15);
        assert!((fy[2] - fx[1]).abs() < 1e-15);
        assert!((fy[3] - fx[3]).abs() < 1e-15);
    }

    #[test]
    fn nonphysical_states_are_rejected() {
        let bad_rho = [-1.0, 0.0, 0.0, 1.0];
        assert!(matches!(euler2d_physical_flux(&bad_rho, Direction::X, GAMMA), Err(Error::NonphysicalState { .. })));
        let bad_p = [1.0, 2.0, 0.0, 1.0];
        assert!(matches!(euler2d_physical_flux(&bad_p, Direction::X, GAMMA), Err(Error::NonphysicalState { .. })));
        let ch = Chandrashekar { direction: Direction::X, gamma: GAMMA };
        let ok = euler_conservative(1.0, 0.0, 0.0, 1.0, GAMMA);
        let mut out = [0.0; 4];
        assert!(ch.evaluate(&ok, &bad_p, &mut out).is_err());
    }

    #[test]
    fn unknown_flux_name() {
        assert!(matches!(
            catalog_flux::<f64>("roe", FluxParams::default(), Direction::X),
            Err(Error::UnknownFlux(_))
        ));
        assert!(catalog_components("nope").is_err());
    }

    #[test]
    fn general_flux_without_d_left_is_reported() {
        struct OnlyRight;
        impl NumericalFlux<f64> for OnlyRight {
            fn name(&self) -> &str {
                "only-right"
            }
            fn components(&self) -> usize {
                1
            }
            fn symmetry(&self) -> FluxSymmetry {
                FluxSymmetry::General
            }
            fn physical(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
                out[0] = u[0];
                Ok(())
            }
            fn evaluate(&self, l: &[f64], _: &[f64], out: &mut [f64]) -> Result<()> {
                out[0] = l[0];
                Ok(())
            }
            fn d_right(&self, _: &[f64], _: &[f64], out: &mut [f64]) -> Result<()> {
                out[0] = 0.0;
                Ok(())
            }
        }
        let mut out = [0.0];
        assert!(matches!(OnlyRight.d_left(&[1.0], &[1.0], &mut out), Err(Error::Unsupported(_))));
    }
}

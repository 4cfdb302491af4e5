//! Test problems with exact solutions: a translating sine wave for linear
//! advection, a pre-shock Burgers wave traced along characteristics, and the
//! isentropic Euler vortex. Every exact solution takes a speed factor `c` and
//! solves `u_t + c f(u)_x = 0`; `c = 1` is the original law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::euler_conservative;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquationKind {
    Advection,
    Burgers,
    Euler2d,
}

impl EquationKind {
    pub const NAMES: [&'static str; 3] = ["advection", "burgers", "euler2d"];

    pub fn dims(self) -> usize {
        match self {
            EquationKind::Advection | EquationKind::Burgers => 1,
            EquationKind::Euler2d => 2,
        }
    }

    pub fn components(self) -> usize {
        match self {
            EquationKind::Advection | EquationKind::Burgers => 1,
            EquationKind::Euler2d => 4,
        }
    }
}

/// Vortex strength, far-field Mach number and adiabatic index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VortexParams<T> {
    pub epsilon: T,
    pub mach: T,
    pub gamma: T,
}

impl<T: Real> Default for VortexParams<T> {
    fn default() -> Self {
        Self { epsilon: T::lit(5.0), mach: T::lit(0.5), gamma: T::lit(1.4) }
    }
}

/// Conservative isentropic vortex state `(ρ, ρu, ρv, ρE)` centred at the
/// origin, with `r = 1 − x² − y²`,
/// `ρ = (1 − ε²(γ−1)M²/(8π²) e^r)^{1/(γ−1)}`, `u = 1 − εy/(2π) e^{r/2}`,
/// `v = εx/(2π) e^{r/2}` and `p = ρ^γ/(γM²)`.
pub fn vortex_initial_state<T: Real>(x: T, y: T, params: VortexParams<T>) -> [T; 4] {
    let VortexParams { epsilon, mach, gamma } = params;
    let one = T::one();
    let pi = T::PI();
    let r = one - x * x - y * y;
    let base = one - epsilon * epsilon * (gamma - one) * mach * mach / (T::lit(8.0) * pi * pi) * r.exp();
    let rho = base.powf(one / (gamma - one));
    let swirl = epsilon / (T::lit(2.0) * pi) * (r / T::lit(2.0)).exp();
    let u = one - swirl * y;
    let v = swirl * x;
    let p = rho.powf(gamma) / (gamma * mach * mach);
    euler_conservative(rho, u, v, p, gamma)
}

/// Wraps `x` into `[lo, hi)`.
pub fn wrap_periodic<T: Real>(x: T, lo: T, hi: T) -> T {
    let len = hi - lo;
    let mut s = (x - lo) % len;
    if s < T::zero() {
        s += len;
    }
    lo + s
}

/// Vortex translated horizontally by `c·t` on the periodic `x` interval.
pub fn vortex_exact<T: Real>(x: T, y: T, t: T, c: T, x_range: (T, T), params: VortexParams<T>) -> [T; 4] {
    vortex_initial_state(wrap_periodic(x - c * t, x_range.0, x_range.1), y, params)
}

/// Smooth periodic profile shared by the scalar problems:
/// `mean + amplitude · sin(2π (x − lo)/(hi − lo))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineProfile<T> {
    pub mean: T,
    pub amplitude: T,
    pub lo: T,
    pub hi: T,
}

impl<T: Real> SineProfile<T> {
    fn wavenumber(&self) -> T {
        T::lit(2.0) * T::PI() / (self.hi - self.lo)
    }

    pub fn value(&self, x: T) -> T {
        self.mean + self.amplitude * (self.wavenumber() * (x - self.lo)).sin()
    }

    pub fn derivative(&self, x: T) -> T {
        self.amplitude * self.wavenumber() * (self.wavenumber() * (x - self.lo)).cos()
    }

    /// Time at which a Burgers wave with this profile steepens into a shock.
    pub fn breaking_time(&self) -> T {
        T::one() / (self.amplitude.abs() * self.wavenumber())
    }
}

/// `u0(x − c·a·t)`.
pub fn advection_exact<T: Real>(profile: &SineProfile<T>, a: T, x: T, t: T, c: T) -> T {
    profile.value(x - c * a * t)
}

/// Solution of `u_t + c (u²/2)_x = 0` before the shock: the root of
/// `u = u0(x − c u t)`, found by Newton's method from `u0(x)`.
pub fn burgers_exact<T: Real>(profile: &SineProfile<T>, x: T, t: T, c: T) -> Result<T> {
    let ct = c * t;
    if ct >= profile.breaking_time() {
        return Err(Error::NoReferenceSolution(format!("Burgers wave has broken by c·t = {}", ct.as_f64())));
    }
    let mut u = profile.value(x);
    for _ in 0..60 {
        let xi = x - ct * u;
        let res = u - profile.value(xi);
        let slope = T::one() + ct * profile.derivative(xi);
        let step = res / slope;
        u -= step;
        if step.abs() <= T::lit(1e-15) * (T::one() + u.abs()) {
            return Ok(u);
        }
    }
    Err(Error::NoReferenceSolution("characteristic root did not converge".into()))
}

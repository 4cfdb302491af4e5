//! Runge-Kutta tableaux, stability functions and step-extraction vectors.
//!
//! A tableau may be deliberately inconsistent (`sum(b) != 1`); tableaux
//! built from Krylov polynomials are the main example. Consistency is a
//! property to query, not an invariant.

use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableauKind {
    Explicit,
    Implicit,
}

/// Runge-Kutta method `(A, b, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau<T> {
    name: String,
    s: usize,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    kind: TableauKind,
}

/// Default acceptance tolerance for [`ButcherTableau::find_v`].
pub const V_VECTOR_TOL: f64 = 1e-10;

impl<T: Real> ButcherTableau<T> {
    /// Builds a tableau from a row-major `A`. The kind is inferred: strictly
    /// lower triangular `A` gives an explicit method.
    pub fn new(name: impl Into<String>, a: Vec<T>, b: Vec<T>, c: Vec<T>) -> Result<Self> {
        let s = b.len();
        let kind = if is_strictly_lower(s, &a) { TableauKind::Explicit } else { TableauKind::Implicit };
        Self::with_kind(name, a, b, c, kind)
    }

    pub fn with_kind(
        name: impl Into<String>,
        a: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
        kind: TableauKind,
    ) -> Result<Self> {
        let name = name.into();
        let s = b.len();
        if s == 0 {
            return Err(Error::InvalidTableau(format!("{name}: zero stages")));
        }
        if a.len() != s * s || c.len() != s {
            return Err(Error::InvalidTableau(format!(
                "{name}: inconsistent dimensions (A has {} entries, b {}, c {})",
                a.len(),
                s,
                c.len()
            )));
        }
        if a.iter().chain(&b).chain(&c).any(|x| !x.is_finite()) {
            return Err(Error::InvalidTableau(format!("{name}: non-finite coefficient")));
        }
        if kind == TableauKind::Explicit && !is_strictly_lower(s, &a) {
            return Err(Error::InvalidTableau(format!("{name}: explicit tableau with non-strictly-lower A")));
        }
        Ok(Self { name, s, a, b, c, kind })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.s
    }

    pub fn kind(&self) -> TableauKind {
        self.kind
    }

    pub fn is_explicit(&self) -> bool {
        self.kind == TableauKind::Explicit
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> T {
        self.a[i * self.s + j]
    }

    pub fn a_matrix(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn c(&self) -> &[T] {
        &self.c
    }

    /// `sum(b) == 1` within `tol`.
    pub fn is_consistent(&self, tol: T) -> bool {
        (self.b.iter().copied().sum::<T>() - T::one()).abs() <= tol
    }

    /// Evaluates `phi(z) = 1 + z b^T (I - zA)^{-1} 1`.
    pub fn stability_function(&self, z: T) -> Result<T> {
        let y = self.solve_shifted(-z, &vec![T::one(); self.s])?;
        let by: T = self.b.iter().zip(&y).map(|(&b, &y)| b * y).sum();
        Ok(T::one() + z * by)
    }

    /// Coefficients `p_0..p_s` of the stability polynomial of an explicit
    /// method; `p_0 = 1` and `p_j = b^T A^{j-1} 1`.
    pub fn stability_polynomial_coeffs(&self) -> Result<Vec<T>> {
        if !self.is_explicit() {
            return Err(Error::NotExplicit(self.name.clone()));
        }
        let mut coeffs = Vec::with_capacity(self.s + 1);
        coeffs.push(T::one());
        let mut w = vec![T::one(); self.s];
        for _ in 0..self.s {
            coeffs.push(self.b.iter().zip(&w).map(|(&b, &w)| b * w).sum());
            w = (0..self.s).map(|i| (0..self.s).map(|j| self.a(i, j) * w[j]).sum()).collect();
        }
        Ok(coeffs)
    }

    /// Row vector `b^T (I + mu A)^{-1}`, the stage weights of one pseudo-time
    /// step in the effective interface flux.
    pub fn stage_weights(&self, mu: T) -> Result<Vec<T>> {
        // (I + mu A)^T w = b
        let s = self.s;
        let mt = DenseMatrix::from_fn(s, s, |i, j| {
            let id = if i == j { T::one() } else { T::zero() };
            id + mu * self.a(j, i)
        });
        if self.is_explicit() {
            // upper triangular with unit diagonal
            let mut w = self.b.clone();
            for i in (0..s).rev() {
                let mut acc = w[i];
                for j in i + 1..s {
                    acc -= mt[(i, j)] * w[j];
                }
                w[i] = acc;
            }
            Ok(w)
        } else {
            mt.solve(&self.b).map_err(|_| Error::SingularStageMatrix { z: -mu.as_f64() })
        }
    }

    /// Finds `v` with `v^T A = b^T` and `v^T 1 = 1` by least squares on the
    /// stacked system `[A^T; 1^T] v = [b; 1]`. Absent when the residual
    /// exceeds `tol`.
    pub fn find_v(&self, tol: T) -> Option<Vec<T>> {
        let s = self.s;
        let sys = DenseMatrix::from_fn(s + 1, s, |i, j| if i < s { self.a(j, i) } else { T::one() });
        let mut rhs = self.b.clone();
        rhs.push(T::one());
        let (v, _) = sys.least_squares(&rhs).ok()?;
        if v.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let (res_a, res_1) = self.v_residuals(&v);
        (res_a <= tol && res_1 <= tol).then_some(v)
    }

    /// `(||v^T A - b^T||_inf, |v^T 1 - 1|)`.
    pub fn v_residuals(&self, v: &[T]) -> (T, T) {
        let s = self.s;
        let res_a = (0..s).fold(T::zero(), |m, j| {
            let vaj: T = (0..s).map(|i| v[i] * self.a(i, j)).sum();
            m.max((vaj - self.b[j]).abs())
        });
        let res_1 = (v.iter().copied().sum::<T>() - T::one()).abs();
        (res_a, res_1)
    }

    /// Solves `(I + shift A) y = rhs`.
    fn solve_shifted(&self, shift: T, rhs: &[T]) -> Result<Vec<T>> {
        let s = self.s;
        if self.is_explicit() {
            let mut y = rhs.to_vec();
            for i in 0..s {
                let mut acc = rhs[i];
                for j in 0..i {
                    acc -= shift * self.a(i, j) * y[j];
                }
                y[i] = acc;
            }
            return Ok(y);
        }
        let m = DenseMatrix::from_fn(s, s, |i, j| {
            let id = if i == j { T::one() } else { T::zero() };
            id + shift * self.a(i, j)
        });
        m.solve(rhs).map_err(|_| Error::SingularStageMatrix { z: (-shift).as_f64() })
    }

    pub fn to_spec(&self) -> TableauSpec {
        TableauSpec {
            name: self.name.clone(),
            s: self.s,
            a: self.a.iter().map(|x| x.as_f64()).collect(),
            b: self.b.iter().map(|x| x.as_f64()).collect(),
            c: self.c.iter().map(|x| x.as_f64()).collect(),
            kind: self.kind,
        }
    }

    pub fn from_spec(spec: &TableauSpec) -> Result<Self> {
        if spec.s != spec.b.len() {
            return Err(Error::InvalidTableau(format!("{}: s = {} but b has {} entries", spec.name, spec.s, spec.b.len())));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        Self::with_kind(spec.name.clone(), conv(&spec.a), conv(&spec.b), conv(&spec.c), spec.kind)
    }
}

fn is_strictly_lower<T: Real>(s: usize, a: &[T]) -> bool {
    a.len() == s * s && (0..s).all(|i| (i..s).all(|j| a[i * s + j] == T::zero()))
}

/// Serialized form of a tableau: `{name, s, A (row-major), b, c, kind}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableauSpec {
    pub name: String,
    pub s: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub kind: TableauKind,
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 6] = [
    "explicit-euler",
    "ssprk3",
    "implicit-euler",
    "implicit-midpoint",
    "lobatto-iiic-3",
    "radau-iia-2",
];

/// Looks up a built-in tableau by name.
pub fn builtin<T: Real>(name: &str) -> Result<ButcherTableau<T>> {
    let l = |x: f64| T::lit(x);
    let t = match name {
        "explicit-euler" => ButcherTableau::new(name, vec![l(0.0)], vec![l(1.0)], vec![l(0.0)]),
        // Shu-Osher SSPRK(3,3)
        "ssprk3" => ButcherTableau::new(
            name,
            vec![l(0.0), l(0.0), l(0.0), l(1.0), l(0.0), l(0.0), l(0.25), l(0.25), l(0.0)],
            vec![l(1.0 / 6.0), l(1.0 / 6.0), l(2.0 / 3.0)],
            vec![l(0.0), l(1.0), l(0.5)],
        ),
        "implicit-euler" => ButcherTableau::new(name, vec![l(1.0)], vec![l(1.0)], vec![l(1.0)]),
        "implicit-midpoint" => ButcherTableau::new(name, vec![l(0.5)], vec![l(1.0)], vec![l(0.5)]),
        "lobatto-iiic-3" => ButcherTableau::new(
            name,
            vec![
                l(1.0 / 6.0),
                l(-1.0 / 3.0),
                l(1.0 / 6.0),
                l(1.0 / 6.0),
                l(5.0 / 12.0),
                l(-1.0 / 12.0),
                l(1.0 / 6.0),
                l(2.0 / 3.0),
                l(1.0 / 6.0),
            ],
            vec![l(1.0 / 6.0), l(2.0 / 3.0), l(1.0 / 6.0)],
            vec![l(0.0), l(0.5), l(1.0)],
        ),
        "radau-iia-2" => ButcherTableau::new(
            name,
            vec![l(5.0 / 12.0), l(-1.0 / 12.0), l(0.75), l(0.25)],
            vec![l(0.75), l(0.25)],
            vec![l(1.0 / 3.0), l(1.0)],
        ),
        other => return Err(Error::UnknownMethodName(other.to_string())),
    }?;
    Ok(t)
}

/// All built-in tableaux.
pub fn builtin_tableaux<T: Real>() -> Vec<ButcherTableau<T>> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("built-in tableau")).collect()
}

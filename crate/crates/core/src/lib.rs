//! Implicit finite-volume time stepping for hyperbolic conservation laws, with
//! pseudo-time, Newton and Krylov inner solvers and tools to audit whether the
//! resulting iteration stays locally conservative and flux consistent.

pub mod audit;
pub mod butcher;
pub mod config;
pub mod dense;
pub mod error;
pub mod experiments;
pub mod flux;
pub mod grid;
pub mod krylov;
pub mod newton;
pub mod problems;
pub mod pseudo_time;
pub mod residual;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations of the generic types.
pub type Tableau = butcher::ButcherTableau<f64>;
pub type Grid = grid::Grid<f64>;
pub type Field = grid::StateField<f64>;
pub type Flux = flux::FluxRef<f64>;
pub type Schedule = pseudo_time::PseudoTimeSchedule<f64>;
pub type PseudoTrace = pseudo_time::PseudoIterationTrace<f64>;
pub type Faces = residual::FaceFluxes<f64>;
pub type Jacobian = residual::BlockStencilJacobian<f64>;
pub type Matrix = dense::DenseMatrix<f64>;
pub type Newton = newton::NewtonConfig<f64>;
pub type NewtonLog = newton::NewtonTrace<f64>;
pub type GmresTrace = krylov::KrylovTrace<f64>;

//! Constrained optimization of element-decomposable nonlinear systems with
//! on-the-fly hyperreduced models.
//!
//! The crate is organized bottom-up:
//!
//! * [`system`]: the element-decomposable system interface, assembly, and
//!   full-order primal/adjoint/sensitivity solves.
//! * [`burgers`]: a 1D steady viscous Burgers inverse-design testbed.
//! * [`rom`]: Galerkin reduced-order models and basis construction.
//! * [`eqp`]: element-weighted (hyperreduced) models and the weight-training
//!   linear program.
//! * [`lp`]: a dense simplex solver.
//! * [`trustregion`]: a bound-constrained trust-region method with inexact
//!   gradients.
//! * [`auglag`]: the outer augmented Lagrangian loop.
//! * [`eqpbtr`]: glue that builds trust-region models from reduced and
//!   hyperreduced models on the fly.
//! * [`cli`]: run configuration, experiment drivers, and reporting.

pub mod auglag;
pub mod burgers;
pub mod cli;
pub mod eqp;
pub mod eqpbtr;
pub mod error;
pub mod linalg;
pub mod lp;
pub mod rom;
pub mod system;
pub mod trustregion;

pub use error::{Error, Result};

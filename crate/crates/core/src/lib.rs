//! Indirect solver for nonlinear optimal control problems with constant
//! state and control delays.
//!
//! The pieces, bottom up:
//!
//! - [`mesh`]: time grids, sampled functions with dense interpolation, and
//!   the delay triple. Delayed and advanced evaluations (with the horizon
//!   indicator) live here.
//! - [`problem`]: problem definitions as callbacks plus control set, target
//!   and history functions; [`problems`] holds the built-in registry.
//! - [`integrate`]: method-of-steps integration of the delayed state equation
//!   forward and the advanced adjoint equation backward, with dense output.
//! - [`pmp`]: extremals, control synthesis laws (selected by name), and
//!   residuals for the first-order optimality conditions.
//! - [`solve`]: inner damped forward-backward sweep, outer Newton shooting.
//! - [`homotopy`]: continuation in the delay parameter with warm starts and
//!   continuity metrics.
//! - [`variations`]: needle-like variations, variation vectors, cone
//!   sampling and the multiplier inequality check.
//! - [`oracle`]: independent reference solvers (direct collocation) used to
//!   cross-validate the indirect path; nothing in the solver depends on it.
//! - [`io`]: CSV/JSON artifact writers and readers.

pub mod error;
pub mod mesh;
pub mod problem;
pub mod problems;
pub mod integrate;
pub mod pmp;
pub mod solve;
pub mod homotopy;
pub mod variations;
pub mod oracle;
pub mod io;

pub use error::{Error, Result};
pub use mesh::{DelayVector, InterpRule, SampledFunction, TimeGrid};
pub use problem::{ControlSet, FinalTimeMode, OcpProblem, Target};

//! Two-timescale stochastic recursive inclusions.
//!
//! The crate simulates and checks coupled recursions
//!
//! ```text
//! Y(n+1) - Y(n) - b(n) M2(n+1) ∈ b(n) H2(X(n), Y(n), S2(n))
//! X(n+1) - X(n) - a(n) M1(n+1) ∈ a(n) H1(X(n), Y(n), S1(n))
//! ```
//!
//! where `H1`, `H2` are set-valued drifts with convex compact values, `S1`, `S2`
//! are finite-alphabet Markov chains whose transition rows may depend on the
//! current iterates, and `b(n)/a(n) → 0`.
//!
//! Modules, bottom-up:
//!
//! - [`convex_geometry`]: convex compact sets as finite point clouds (support
//!   functions, weighted Minkowski sums, Hausdorff distance, projection).
//! - [`set_valued_maps`]: drift maps, their validation, continuous outer
//!   approximants and single-valued parametrizations.
//! - [`markov`]: finite kernels, stationary polytopes and the slow measure family.
//! - [`mean_field`]: averaged drifts (Aumann integrals over stationary laws).
//! - [`di_dynamics`]: Euler solver for differential inclusions and limit-set
//!   diagnostics.
//! - [`two_timescale`]: the coupled recursion driver and its diagnostics.
//! - [`saddle_opt`]: primal-descent/dual-ascent solver for Markov-averaged
//!   equality-constrained convex programs.

pub mod convex_geometry;
pub mod di_dynamics;
pub mod error;
pub mod markov;
pub mod mean_field;
pub mod saddle_opt;
pub mod set_valued_maps;
pub mod two_timescale;

pub use convex_geometry::{ConvexSet, Point};
pub use error::{Error, Result};

/// Library version string.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Robust low-rank matrix completion under dense noise and sparse gross
//! corruptions.
//!
//! The observed data is a partially known matrix `Ŵ` whose entries may be
//! noisy and a few of which are grossly wrong. The solver recovers a
//! rank-`r` matrix `W` and a sparse corruption matrix `E` by alternating
//! two exactly solvable subproblems:
//!
//! * a **W-step** that fits the best rank-`r` matrix to the corruption-
//!   corrected data through an orthonormal subspace parameterization,
//!   solved by a Levenberg–Marquardt / Gauss–Newton iteration
//!   ([`wstep`]), safeguarded by the closed-form minimizer of a separable
//!   quadratic majorization ([`majorize`]);
//! * an **E-step** that updates the corruption under hard cardinality and
//!   norm bounds, in closed form ([`estep`]).
//!
//! Both steps carry proximal regularization terms, which make the outer
//! loop ([`driver`]) monotone in an augmented merit and convergent to a
//! stationary point. A convex relaxation (nuclear norm + elementwise
//! `l1`, solved by an accelerated proximal gradient method in
//! [`init_apg`]) provides the starting point, and optional Huber-
//! regression boosters ([`heuristics`]) sharpen corruption detection in
//! the early iterations.
//!
//! [`datagen`] generates reproducible synthetic benchmark problems and
//! the associated metrics (RMSE, visible RMSE, the oracle noise floor,
//! support F-measure, and a missing-data x corruption phase diagram);
//! [`io`] defines the text file formats used by the `parsumi` binary.
//!
//! See the crate examples for end-to-end usage of each stage.

pub mod core;
pub mod datagen;
pub mod driver;
pub mod error;
pub mod estep;
pub mod heuristics;
pub mod init_apg;
pub mod io;
pub mod majorize;
pub mod wstep;

pub use crate::core::{
    merit_f, IterationState, ObservedMatrix, SolverConfig, SparseCorruption, SubspaceBasis,
};
pub use crate::driver::{parsumi_solve, Initialization, SolveOutcome, SolveReport};
pub use crate::error::{Error, Result};

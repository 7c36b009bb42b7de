//! Closed-form corruption step: the `l0`- and norm-constrained least
//! squares update
//!
//! ```text
//! min_E ½‖H∘(W^{k+1}−Ŵ+E)‖² + (β2/2)‖E−E^k‖²
//!       s.t. ‖E‖₀ ≤ N0, ‖E‖ ≤ K_E, supp(E) ⊆ Ω
//! ```
//!
//! reduces over `x = P_Ω(E)` to `min ‖x−b‖²` with
//! `b = P_Ω(Ŵ−W^{k+1}+β2·E^k)/(1+β2)`, whose optimum keeps the `N0`
//! largest-magnitude components of `b` and rescales them onto the norm
//! ball when they exceed it.

use nalgebra::{DMatrix, DVector};

use crate::core::{ObservedMatrix, SolverConfig, SparseCorruption};
use crate::error::Result;

/// Proximally averaged residual `b` in canonical `Ω` order. Requires
/// `β2 > 0`.
pub fn estep_target(
    obs: &ObservedMatrix,
    w_next: &DMatrix<f64>,
    e_k: &SparseCorruption,
    beta2: f64,
) -> DVector<f64> {
    assert!(beta2 > 0.0, "beta2 must be positive");
    assert_eq!(w_next.nrows(), obs.n_rows());
    assert_eq!(w_next.ncols(), obs.n_cols());
    DVector::from_iterator(
        obs.nnz(),
        obs.support().iter().enumerate().map(|(k, &(i, j))| {
            (obs.observed_values()[k] - w_next[(i, j)] + beta2 * e_k.values()[k]) / (1.0 + beta2)
        }),
    )
}

/// Exact minimizer of `‖x−b‖²` subject to `‖x‖₀ ≤ N0` and `‖x‖ ≤ K_E`.
///
/// `I` collects the `N0` largest `|b_i|` (ties broken to the lowest
/// canonical index); on `I` the solution is `b_I`, rescaled by
/// `K_E/‖b_I‖` only when `‖b_I‖ > K_E` (the boundary case falls to the
/// unchanged branch). Deterministic, hence idempotent in `b`.
pub fn solve_sparse_step(b: &DVector<f64>, n0: usize, k_e: f64) -> DVector<f64> {
    let len = b.len();
    let mut x = DVector::zeros(len);
    if n0 == 0 || len == 0 {
        return x;
    }
    let keep = n0.min(len);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &c| {
        b[c].abs()
            .partial_cmp(&b[a].abs())
            .expect("non-finite target")
            .then(a.cmp(&c))
    });
    let selected = &order[..keep];
    let norm_sq: f64 = selected.iter().map(|&i| b[i] * b[i]).sum();
    let norm = norm_sq.sqrt();
    let scale = if norm > k_e { k_e / norm } else { 1.0 };
    for &i in selected {
        x[i] = scale * b[i];
    }
    x
}

/// One corruption update: `E^{k+1} = P*_Ω(x)` with `x` from
/// [`solve_sparse_step`] applied to [`estep_target`]. Global optimality of
/// the subproblem makes the update a descent step on its objective.
pub fn update_corruption(
    obs: &ObservedMatrix,
    w_next: &DMatrix<f64>,
    e_k: &SparseCorruption,
    cfg: &SolverConfig,
) -> Result<SparseCorruption> {
    let b = estep_target(obs, w_next, e_k, cfg.beta2);
    let x = solve_sparse_step(&b, cfg.n0, cfg.k_e);
    SparseCorruption::new(obs, x, cfg.n0, cfg.k_e)
}

/// Objective of the corruption subproblem at `E` (values over `Ω`), used
/// by descent checks.
pub fn estep_objective(
    obs: &ObservedMatrix,
    w_next: &DMatrix<f64>,
    e: &DVector<f64>,
    e_k: &SparseCorruption,
    beta2: f64,
) -> f64 {
    let fit = crate::core::merit_f_omega(w_next, e, obs);
    let prox = (e - e_k.values()).norm_squared();
    fit + 0.5 * beta2 * prox
}

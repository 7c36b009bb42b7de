//! Domain types and masked-matrix algebra shared by every solver stage.
//!
//! The measurement model is a partially observed matrix `Ŵ` with support
//! `Ω`, completed by a rank-constrained `W` plus a sparse corruption `E`
//! supported inside `Ω`. The elementwise weight matrix
//!
//! ```text
//! H_ij = 1        if (i,j) ∈ Ω
//!        sqrt(ε)  otherwise
//! ```
//!
//! folds the Tikhonov term on the unobserved entries into a single
//! Frobenius objective `f(W,E) = ½‖H∘(W+E−Ŵ)‖²`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Partially observed measurement matrix: dimensions, support `Ω`, the
/// observed values, and the regularization weight `ε` that induces `H`.
///
/// The support is kept in canonical order — sorted by `(col, row)` — and
/// every vectorized quantity over `Ω` (projections, corruption values,
/// E-step targets) uses that order. Off-support entries of `Ŵ` are zero by
/// construction and are not stored.
#[derive(Debug, Clone)]
pub struct ObservedMatrix {
    m: usize,
    n: usize,
    support: Vec<(usize, usize)>,
    values: Vec<f64>,
    lookup: HashMap<(usize, usize), usize>,
    epsilon: f64,
}

impl ObservedMatrix {
    /// Builds an observed matrix from `(row, col, value)` triplets.
    ///
    /// Duplicate `(row, col)` pairs are an error rather than a merge;
    /// silent merging hides data bugs. Requires `ε ∈ (0,1)` and all
    /// indices in bounds.
    pub fn new(
        m: usize,
        n: usize,
        entries: &[(usize, usize, f64)],
        epsilon: f64,
    ) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Parameter(format!(
                "matrix dimensions must be positive, got {m}x{n}"
            )));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Parameter(format!(
                "epsilon must lie in (0,1), got {epsilon}"
            )));
        }
        let mut tagged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for &(i, j, v) in entries {
            if i >= m || j >= n {
                return Err(Error::Dimension(format!(
                    "observation ({i},{j}) out of bounds for {m}x{n}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "observation ({i},{j}) has non-finite value {v}"
                )));
            }
            tagged.push((i, j, v));
        }
        // Canonical order: column-major, i.e. sort by (col, row).
        tagged.sort_unstable_by_key(|&(i, j, _)| (j, i));
        for w in tagged.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Parameter(format!(
                    "duplicate observation at ({},{})",
                    w[0].0, w[0].1
                )));
            }
        }
        let support: Vec<(usize, usize)> = tagged.iter().map(|&(i, j, _)| (i, j)).collect();
        let values: Vec<f64> = tagged.iter().map(|&(_, _, v)| v).collect();
        let lookup = support
            .iter()
            .enumerate()
            .map(|(k, &ij)| (ij, k))
            .collect();
        Ok(Self {
            m,
            n,
            support,
            values,
            lookup,
            epsilon,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.m
    }

    pub fn n_cols(&self) -> usize {
        self.n
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of observed entries `|Ω|`.
    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    /// Support in canonical `(col, row)`-sorted order.
    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    /// Observed values `P_Ω(Ŵ)` in canonical order.
    pub fn observed_values(&self) -> &[f64] {
        &self.values
    }

    /// Position of `(i,j)` in the canonical ordering, if observed.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.lookup.get(&(i, j)).copied()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.lookup.contains_key(&(i, j))
    }

    /// Entry of the weight matrix `H`: 1 on `Ω`, `sqrt(ε)` off it.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if self.is_observed(i, j) {
            1.0
        } else {
            self.epsilon.sqrt()
        }
    }

    /// Materializes `H` densely.
    pub fn h_dense(&self) -> DMatrix<f64> {
        let off = self.epsilon.sqrt();
        let mut h = DMatrix::from_element(self.m, self.n, off);
        for &(i, j) in &self.support {
            h[(i, j)] = 1.0;
        }
        h
    }

    /// `Ŵ` as a dense matrix, zero off `Ω`.
    pub fn dense_observed(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.m, self.n);
        for (k, &(i, j)) in self.support.iter().enumerate() {
            w[(i, j)] = self.values[k];
        }
        w
    }

    /// `P_Ω(M)`: entries of `M` at `Ω` in canonical order.
    pub fn project(&self, mat: &DMatrix<f64>) -> Result<DVector<f64>> {
        if mat.nrows() != self.m || mat.ncols() != self.n {
            return Err(Error::Dimension(format!(
                "expected {}x{} matrix, got {}x{}",
                self.m,
                self.n,
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(DVector::from_iterator(
            self.support.len(),
            self.support.iter().map(|&(i, j)| mat[(i, j)]),
        ))
    }

    /// Adjoint `P*_Ω(v)`: dense matrix that is zero off `Ω` and carries `v`
    /// on `Ω` in canonical order. Satisfies `⟨P_Ω(M), v⟩ = ⟨M, P*_Ω(v)⟩`.
    pub fn embed(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        if v.len() != self.support.len() {
            return Err(Error::Dimension(format!(
                "expected vector of length {}, got {}",
                self.support.len(),
                v.len()
            )));
        }
        let mut mat = DMatrix::zeros(self.m, self.n);
        for (k, &(i, j)) in self.support.iter().enumerate() {
            mat[(i, j)] = v[k];
        }
        Ok(mat)
    }

    /// Median of `|P_Ω(Ŵ)|`; zero for an empty support.
    pub fn median_abs_observed(&self) -> f64 {
        median_abs(&self.values)
    }
}

pub(crate) fn median_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite value"));
    let k = abs.len();
    if k % 2 == 1 {
        abs[k / 2]
    } else {
        0.5 * (abs[k / 2 - 1] + abs[k / 2])
    }
}

/// Sparse corruption matrix `E`, supported inside `Ω`, with cardinality
/// bound `N0` and Frobenius-norm bound `K_E`.
///
/// Stored as a vector over `Ω` in canonical order, so off-support entries
/// are unrepresentable rather than checked.
#[derive(Debug, Clone)]
pub struct SparseCorruption {
    values: DVector<f64>,
    n0: usize,
    k_e: f64,
}

/// Slack allowed on the `‖E‖ ≤ K_E` check; the E-step projects exactly
/// onto the ball, so only round-off can exceed it.
pub const NORM_BOUND_SLACK: f64 = 1e-12;

impl SparseCorruption {
    /// All-zero corruption compatible with `obs`.
    pub fn zeros(obs: &ObservedMatrix, n0: usize, k_e: f64) -> Self {
        Self {
            values: DVector::zeros(obs.nnz()),
            n0,
            k_e,
        }
    }

    /// Wraps values over `Ω` (canonical order), validating the cardinality
    /// and norm bounds.
    pub fn new(obs: &ObservedMatrix, values: DVector<f64>, n0: usize, k_e: f64) -> Result<Self> {
        if values.len() != obs.nnz() {
            return Err(Error::Dimension(format!(
                "corruption vector has length {}, support has {}",
                values.len(),
                obs.nnz()
            )));
        }
        if !(k_e > 0.0) {
            return Err(Error::Parameter(format!("K_E must be positive, got {k_e}")));
        }
        let card = values.iter().filter(|v| **v != 0.0).count();
        if card > n0 {
            return Err(Error::Parameter(format!(
                "corruption has {card} nonzeros, bound is N0 = {n0}"
            )));
        }
        let norm = values.norm();
        if norm > k_e + NORM_BOUND_SLACK {
            return Err(Error::Parameter(format!(
                "corruption norm {norm} exceeds K_E = {k_e}"
            )));
        }
        Ok(Self { values, n0, k_e })
    }

    /// Values over `Ω` in canonical order.
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn k_e(&self) -> f64 {
        self.k_e
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    /// Dense `m×n` embedding `P*_Ω(E)`.
    pub fn to_dense(&self, obs: &ObservedMatrix) -> DMatrix<f64> {
        obs.embed(&self.values).expect("length fixed at construction")
    }

    /// Nonzero entries as `(row, col, value)` triplets in canonical order.
    pub fn nonzeros<'a>(
        &'a self,
        obs: &'a ObservedMatrix,
    ) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
        obs.support()
            .iter()
            .zip(self.values.iter())
            .filter(|(_, v)| **v != 0.0)
            .map(|(&(i, j), &v)| (i, j, v))
    }
}

/// Orthonormal `m×r` basis of the column space that parameterizes the
/// rank-constrained factor (`W = N·C`).
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    basis: DMatrix<f64>,
}

/// Max-entry tolerance on `‖NᵀN − I‖` accepted by [`SubspaceBasis::from_orthonormal`].
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

impl SubspaceBasis {
    /// Wraps a matrix that is already orthonormal to [`ORTHONORMALITY_TOL`].
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let r = basis.ncols();
        if basis.nrows() < r {
            return Err(Error::Dimension(format!(
                "basis is {}x{}; need at least as many rows as columns",
                basis.nrows(),
                r
            )));
        }
        let gram = basis.transpose() * &basis;
        let dev = (gram - DMatrix::<f64>::identity(r, r)).abs().max();
        if dev > ORTHONORMALITY_TOL {
            return Err(Error::Numerical(format!(
                "basis deviates from orthonormality by {dev:.3e}"
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes the columns of `mat` by QR with the sign convention
    /// that R's diagonal is nonnegative, so the result is deterministic.
    /// Near-dependent columns are replaced by canonical basis directions.
    pub fn orthonormalize(mat: &DMatrix<f64>) -> Result<Self> {
        let (m, r) = (mat.nrows(), mat.ncols());
        if m < r {
            return Err(Error::Dimension(format!(
                "cannot orthonormalize {m}x{r} with more columns than rows"
            )));
        }
        let qr = mat.clone().qr();
        let mut q = qr.q();
        let rmat = qr.r();
        let scale = mat.amax().max(1.0);
        let mut degenerate = Vec::new();
        for k in 0..r {
            let d = rmat[(k, k)];
            if d < 0.0 {
                let mut col = q.column_mut(k);
                col.neg_mut();
            }
            if d.abs() <= 1e-12 * scale {
                degenerate.push(k);
            }
        }
        if !degenerate.is_empty() {
            complete_basis(&mut q, &degenerate);
        }
        Self::from_orthonormal(q)
    }

    /// With `k < r` leading columns given, produces an orthonormal basis
    /// whose first `k` columns span the same space, completing with
    /// canonical directions.
    pub fn completed_from(cols: &DMatrix<f64>, r: usize) -> Result<Self> {
        let m = cols.nrows();
        let mut padded = DMatrix::zeros(m, r);
        padded.view_mut((0, 0), (m, cols.ncols().min(r))).copy_from(
            &cols.view((0, 0), (m, cols.ncols().min(r))),
        );
        Self::orthonormalize(&padded)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Replaces the listed columns of `q` with canonical directions chosen by
/// Gram–Schmidt against all other columns. Deterministic.
fn complete_basis(q: &mut DMatrix<f64>, degenerate: &[usize]) {
    let (m, r) = (q.nrows(), q.ncols());
    for &k in degenerate {
        let mut replaced = false;
        for cand in 0..m {
            let mut v = DVector::zeros(m);
            v[cand] = 1.0;
            for c in 0..r {
                if c == k {
                    continue;
                }
                let qc = q.column(c).clone_owned();
                let proj = qc.dot(&v);
                v -= qc * proj;
            }
            // Repeat once; plain Gram-Schmidt loses orthogonality.
            for c in 0..r {
                if c == k {
                    continue;
                }
                let qc = q.column(c).clone_owned();
                let proj = qc.dot(&v);
                v -= qc * proj;
            }
            let norm = v.norm();
            if norm > 1e-6 {
                q.set_column(k, &(v / norm));
                replaced = true;
                break;
            }
        }
        debug_assert!(replaced, "no canonical direction outside span");
    }
}

/// Every scalar the solver needs: model bounds, proximal weights, the LM
/// schedule, outer stopping, and the heuristic gate schedule.
///
/// `eta_init`/`eta_floor` left as `None` are derived from the convex
/// initializer's output at solve time.
#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub rank: usize,
    pub n0: usize,
    pub k_e: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lm_lambda_init: f64,
    pub lm_rho: f64,
    pub lm_max_iter: usize,
    pub lm_tol: f64,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub eta_init: Option<f64>,
    pub eta_floor: Option<f64>,
    pub eta_shrink: f64,
    pub huber_reweight_iters: usize,
    pub use_huber: bool,
    pub rng_seed: u64,
}

pub const DEFAULT_EPSILON: f64 = 1e-10;

impl SolverConfig {
    /// Defaults for a given problem shape with the corruption budget `n0`
    /// chosen by the caller:
    /// `β1 = β2 = 1e-3/sqrt(max(m,n))`, `ρ = 10`, initial LM damping `1e-6`,
    /// `ε = 1e-10`, and `K_E = 20·sqrt(N0)·median|P_Ω(Ŵ)|`.
    pub fn for_problem_with_n0(obs: &ObservedMatrix, rank: usize, n0: usize) -> Result<Self> {
        let (m, n) = (obs.n_rows(), obs.n_cols());
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Parameter(format!(
                "rank {rank} infeasible for a {m}x{n} matrix"
            )));
        }
        let beta = 1e-3 / (m.max(n) as f64).sqrt();
        let med = obs.median_abs_observed();
        let k_e = if n0 > 0 && med > 0.0 {
            20.0 * (n0 as f64).sqrt() * med
        } else {
            // Degenerate data; any positive bound keeps the constraint inactive.
            1.0
        };
        Ok(Self {
            rank,
            n0,
            k_e,
            epsilon: DEFAULT_EPSILON,
            beta1: beta,
            beta2: beta,
            lm_lambda_init: 1e-6,
            lm_rho: 10.0,
            lm_max_iter: 100,
            lm_tol: 1e-10,
            outer_tol: 1e-6,
            outer_max_iter: 300,
            eta_init: None,
            eta_floor: None,
            eta_shrink: 0.8,
            huber_reweight_iters: 3,
            use_huber: true,
            rng_seed: 0,
        })
    }

    /// Defaults with the corruption count unknown: `N0 = ceil(0.15·|Ω|)`.
    pub fn for_problem(obs: &ObservedMatrix, rank: usize) -> Result<Self> {
        let n0 = (0.15 * obs.nnz() as f64).ceil() as usize;
        Self::for_problem_with_n0(obs, rank, n0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Parameter("epsilon must lie in (0,1)".into()));
        }
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::Parameter("beta1 and beta2 must be positive".into()));
        }
        if !(self.lm_rho > 1.0) {
            return Err(Error::Parameter("lm_rho must exceed 1".into()));
        }
        if !(self.k_e > 0.0) {
            return Err(Error::Parameter("K_E must be positive".into()));
        }
        if !(self.eta_shrink > 0.0 && self.eta_shrink < 1.0) {
            return Err(Error::Parameter("eta_shrink must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// One outer iterate: `(W^k, E^k, N^k)` plus the merit value at that point.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub w: DMatrix<f64>,
    pub e: SparseCorruption,
    pub basis: SubspaceBasis,
    pub merit: f64,
    pub iter: usize,
}

impl IterationState {
    pub fn new(
        obs: &ObservedMatrix,
        w: DMatrix<f64>,
        e: SparseCorruption,
        basis: SubspaceBasis,
        iter: usize,
    ) -> Self {
        let merit = merit_f(&w, &e, obs);
        Self {
            w,
            e,
            basis,
            merit,
            iter,
        }
    }

    /// Checks that the stored merit matches a recomputation to relative
    /// tolerance 1e-10.
    pub fn check_merit(&self, obs: &ObservedMatrix) -> Result<()> {
        let fresh = merit_f(&self.w, &self.e, obs);
        let scale = fresh.abs().max(1.0);
        if (fresh - self.merit).abs() > 1e-10 * scale {
            return Err(Error::InternalConsistency(format!(
                "stored merit {} differs from recomputed {}",
                self.merit, fresh
            )));
        }
        Ok(())
    }
}

/// `f(W,E) = ½‖H∘(W+E−Ŵ)‖²`, with `E` and `Ŵ` zero off `Ω`.
///
/// Equals `½‖P_Ω(W−Ŵ+E)‖² + (ε/2)‖P_Ω̄(W)‖²`.
pub fn merit_f(w: &DMatrix<f64>, e: &SparseCorruption, obs: &ObservedMatrix) -> f64 {
    merit_f_omega(w, e.values(), obs)
}

/// Same as [`merit_f`] with the corruption given directly as its vector of
/// values over `Ω` in canonical order.
pub fn merit_f_omega(w: &DMatrix<f64>, e_omega: &DVector<f64>, obs: &ObservedMatrix) -> f64 {
    assert_eq!(w.nrows(), obs.n_rows());
    assert_eq!(w.ncols(), obs.n_cols());
    assert_eq!(e_omega.len(), obs.nnz());
    let mut on = 0.0;
    let mut on_w_sq = 0.0;
    for (k, &(i, j)) in obs.support().iter().enumerate() {
        let wij = w[(i, j)];
        let d = wij + e_omega[k] - obs.observed_values()[k];
        on += d * d;
        on_w_sq += wij * wij;
    }
    let off_sq = (w.norm_squared() - on_w_sq).max(0.0);
    0.5 * (on + obs.epsilon() * off_sq)
}

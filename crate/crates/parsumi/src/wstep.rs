//! Rank-constrained W-step: fit the best rank-`r` matrix to the
//! corruption-corrected data under the proximal weighting, by optimizing
//! over an orthonormal subspace basis `N` with a Levenberg–Marquardt /
//! Gauss–Newton iteration.
//!
//! The subproblem
//!
//! ```text
//! min_W ½‖H∘(W−Ŵ+E^k)‖² + (β1/2)‖H∘(W−W^k)‖²   s.t. rank(W) ≤ r
//! ```
//!
//! is rewritten as `½‖H̄∘W − B^k‖² + const`, where
//!
//! ```text
//! H̄_ij = sqrt(1+β1)                            on Ω
//!        sqrt(ε+ε·β1)                          off Ω
//! B^k_ij = (Ŵ_ij − E^k_ij + β1 W^k_ij)/sqrt(1+β1)   on Ω
//!          ε·β1·W^k_ij/sqrt(ε+ε·β1)                off Ω
//! ```
//!
//! Writing `W = N·C` with `NᵀN = I` and eliminating `C` in closed form
//! reduces this to minimizing, over the basis alone,
//!
//! ```text
//! f(N) = ½ Σ_i ‖B^k_i − Q_i(N) B^k_i‖²,
//! Q_i(N) = D_i N (NᵀD_i²N)⁻¹ NᵀD_i,   D_i = diag(H̄ column i),
//! ```
//!
//! whose Gauss–Newton normal matrix has per-column Kronecker structure
//!
//! ```text
//! J_iᵀJ_i = (A_iᵀy_i y_iᵀA_i) ⊗ (D_i(I−Q_i)D_i)
//!         + Tᵀ[(D_i r_i r_iᵀ D_i) ⊗ (A_iᵀA_i)]T
//! J_iᵀr_i = vec(D_i r_i (A_iᵀy_i)ᵀ)
//! ```
//!
//! with `A_i = D_iN(NᵀD_i²N)⁻¹`, residual `r_i = y_i − Q_i y_i`, and `T`
//! the vec-transpose permutation for the column-major `vec` convention.
//! `A_iᵀy_i` is exactly the coefficient vector `C_i` and `A_iᵀA_i =
//! (NᵀD_i²N)⁻¹`, so assembly needs no Kronecker products explicitly.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::core::{ObservedMatrix, SolverConfig, SparseCorruption, SubspaceBasis};
use crate::error::{Error, Result};

/// Precomputed weighting `H̄` and target `B^k` (plus `B̂^k = H̄⁻¹∘B^k`)
/// for one outer iteration's W-step.
#[derive(Debug, Clone)]
pub struct WStepWorkspace {
    hbar: DMatrix<f64>,
    bk: DMatrix<f64>,
    bhat: DMatrix<f64>,
}

impl WStepWorkspace {
    /// Workspace from arbitrary positive weights and target, mainly for
    /// custom weightings and derivative checks.
    pub fn from_parts(hbar: DMatrix<f64>, bk: DMatrix<f64>) -> Result<Self> {
        if hbar.shape() != bk.shape() {
            return Err(Error::Dimension(format!(
                "weight matrix is {:?}, target is {:?}",
                hbar.shape(),
                bk.shape()
            )));
        }
        if hbar.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Parameter("weights must be strictly positive".into()));
        }
        let bhat = bk.component_div(&hbar);
        Ok(Self { hbar, bk, bhat })
    }

    pub fn n_rows(&self) -> usize {
        self.hbar.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.hbar.ncols()
    }

    pub fn hbar(&self) -> &DMatrix<f64> {
        &self.hbar
    }

    pub fn bk(&self) -> &DMatrix<f64> {
        &self.bk
    }

    /// `B̂^k = H̄⁻¹∘B^k`, the target in the unweighted coordinates.
    pub fn bhat(&self) -> &DMatrix<f64> {
        &self.bhat
    }

    /// `F(W, B̂^k) = ½‖H̄∘(W − B̂^k)‖² = ½‖H̄∘W − B^k‖²`.
    ///
    /// Equals the W-step objective up to a constant independent of `W`,
    /// which makes it the comparison function between the Gauss–Newton
    /// candidate and the majorized candidate.
    pub fn merit(&self, w: &DMatrix<f64>) -> f64 {
        assert_eq!(w.shape(), self.hbar.shape());
        let mut acc = 0.0;
        for ((&wij, &h), &b) in w.iter().zip(self.hbar.iter()).zip(self.bk.iter()) {
            let d = h * wij - b;
            acc += d * d;
        }
        0.5 * acc
    }
}

/// Builds `H̄` and `B^k` from the current iterate. Requires `β1 > 0`.
pub fn build_workspace(
    obs: &ObservedMatrix,
    w_k: &DMatrix<f64>,
    e_k: &SparseCorruption,
    beta1: f64,
) -> WStepWorkspace {
    assert!(beta1 > 0.0, "beta1 must be positive");
    assert_eq!(w_k.nrows(), obs.n_rows());
    assert_eq!(w_k.ncols(), obs.n_cols());
    let eps = obs.epsilon();
    let on_h = (1.0 + beta1).sqrt();
    let off_h = (eps + eps * beta1).sqrt();
    let off_b_scale = eps * beta1 / off_h;

    let mut hbar = DMatrix::from_element(obs.n_rows(), obs.n_cols(), off_h);
    let mut bk = w_k.map(|w| off_b_scale * w);
    for (k, &(i, j)) in obs.support().iter().enumerate() {
        hbar[(i, j)] = on_h;
        bk[(i, j)] = (obs.observed_values()[k] - e_k.values()[k] + beta1 * w_k[(i, j)]) / on_h;
    }
    WStepWorkspace::from_parts(hbar, bk).expect("weights positive by construction")
}

/// Per-column weighted fit, stabilized against the huge dynamic range of
/// the weights (`1` on the support vs `sqrt(ε)` off it): a thin QR of
/// `D_iN` provides the orthonormal image basis, from which the projector,
/// the coefficients `C_i = (NᵀD_i²N)⁻¹NᵀD_i y_i` and the residual
/// `r_i = y_i − Q_i y_i` follow without inverting the ill-conditioned
/// Gram matrix.
struct ColumnFit {
    coeffs: DVector<f64>,
    resid: DVector<f64>,
    /// Orthonormal basis of `span(D_iN)`.
    q_basis: DMatrix<f64>,
    /// `(NᵀD_i²N)⁻¹ = R⁻¹R⁻ᵀ` from the QR factor.
    gram_inv: DMatrix<f64>,
}

fn fit_column(nmat: &DMatrix<f64>, ws: &WStepWorkspace, col: usize) -> Result<ColumnFit> {
    let m = ws.n_rows();
    let r = nmat.ncols();
    let d = ws.hbar.column(col);
    let y = ws.bk.column(col);
    let mut dn = DMatrix::zeros(m, r);
    for t in 0..r {
        for u in 0..m {
            dn[(u, t)] = d[u] * nmat[(u, t)];
        }
    }
    let qr = dn.qr();
    let q_basis = qr.q();
    let rmat = qr.r();
    let scale = rmat.amax();
    for k in 0..r {
        if rmat[(k, k)].abs() <= 1e-14 * scale.max(1e-300) {
            return Err(Error::Numerical(format!(
                "degenerate column {col}: NᵀD²N is singular"
            )));
        }
    }
    let proj = q_basis.transpose() * y;
    let coeffs = rmat
        .solve_upper_triangular(&proj)
        .ok_or_else(|| Error::Numerical(format!("singular triangular factor in column {col}")))?;
    let resid = y - &q_basis * &proj;
    let r_inv = rmat
        .solve_upper_triangular(&DMatrix::identity(r, r))
        .ok_or_else(|| Error::Numerical(format!("singular triangular factor in column {col}")))?;
    let gram_inv = &r_inv * r_inv.transpose();
    Ok(ColumnFit {
        coeffs,
        resid,
        q_basis,
        gram_inv,
    })
}

/// `f(N) = ½ Σ_i ‖B^k_i − Q_i(N)B^k_i‖²` for a raw (not necessarily
/// orthonormal) basis matrix. The value depends only on the column space
/// of `N`, so this is also what finite-difference checks probe.
pub fn subspace_objective_mat(nmat: &DMatrix<f64>, ws: &WStepWorkspace) -> Result<f64> {
    if nmat.nrows() != ws.n_rows() {
        return Err(Error::Dimension(format!(
            "basis has {} rows, workspace has {}",
            nmat.nrows(),
            ws.n_rows()
        )));
    }
    let mut total = 0.0;
    for i in 0..ws.n_cols() {
        let fit = fit_column(nmat, ws, i)?;
        total += 0.5 * fit.resid.norm_squared();
    }
    Ok(total)
}

/// See [`subspace_objective_mat`].
pub fn subspace_objective(basis: &SubspaceBasis, ws: &WStepWorkspace) -> Result<f64> {
    subspace_objective_mat(basis.matrix(), ws)
}

/// Gauss–Newton normal system `JᵀJ`, gradient-side vector `Jᵀr`, and the
/// objective value, accumulated over columns in ascending order.
#[derive(Debug, Clone)]
pub struct GaussNewtonSystem {
    pub jtj: DMatrix<f64>,
    pub jtr: DVector<f64>,
    pub objective: f64,
}

/// Assembles the Gauss–Newton system at `N`.
///
/// Uses the per-column identities `A_iᵀy_i = C_i` and `A_iᵀA_i =
/// (NᵀD_i²N)⁻¹`, and writes the two Kronecker-structured terms directly
/// into the `(p,q)` blocks of `JᵀJ` under the column-major `vec`
/// convention (`x = vec(N)`, entry `(u,p)` at index `p·m+u`).
pub fn gauss_newton_system(basis: &SubspaceBasis, ws: &WStepWorkspace) -> Result<GaussNewtonSystem> {
    let nmat = basis.matrix();
    let m = ws.n_rows();
    let r = nmat.ncols();
    let dim = m * r;
    let mut jtj = vec![0.0f64; dim * dim];
    let mut jtr = vec![0.0f64; dim];
    let mut objective = 0.0;

    let mut z = DMatrix::<f64>::zeros(m, m);
    for i in 0..ws.n_cols() {
        let fit = fit_column(nmat, ws, i)?;
        objective += 0.5 * fit.resid.norm_squared();
        let d = ws.hbar.column(i);
        // s = D_i r_i
        let s: Vec<f64> = (0..m).map(|u| d[u] * fit.resid[u]).collect();

        // Z_i = D_i(I−Q_i)D_i = D_i² − (D_iÛ)(D_iÛ)ᵀ with Û = orth(D_iN);
        // the Gram form keeps round-off from breaking positive
        // semidefiniteness.
        let mut dq = DMatrix::zeros(m, r);
        for t in 0..r {
            for u in 0..m {
                dq[(u, t)] = d[u] * fit.q_basis[(u, t)];
            }
        }
        z.gemm(-1.0, &dq, &dq.transpose(), 0.0);
        for u in 0..m {
            z[(u, u)] += d[u] * d[u];
        }

        for p in 0..r {
            let cp = fit.coeffs[p];
            let seg = &mut jtr[p * m..(p + 1) * m];
            for u in 0..m {
                seg[u] += s[u] * cp;
            }
        }

        let z_slice = z.as_slice();
        for q in 0..r {
            for p in 0..r {
                let cpq = fit.coeffs[p] * fit.coeffs[q];
                let gpq = fit.gram_inv[(p, q)];
                for vv in 0..m {
                    let zcol = &z_slice[vv * m..(vv + 1) * m];
                    let sv = gpq * s[vv];
                    let out = &mut jtj[(q * m + vv) * dim + p * m..(q * m + vv) * dim + p * m + m];
                    for uu in 0..m {
                        out[uu] += cpq * zcol[uu] + sv * s[uu];
                    }
                }
            }
        }
    }

    Ok(GaussNewtonSystem {
        jtj: DMatrix::from_vec(dim, dim, jtj),
        jtr: DVector::from_vec(jtr),
        objective,
    })
}

/// Solves `(JᵀJ + λI)·x = b` by Cholesky, retrying with an escalating
/// diagonal jitter (starting at `1e-14·trace/(m·r)`) if round-off breaks
/// positive definiteness at tiny `λ`.
fn solve_damped(jtj: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let dim = jtj.nrows();
    let mut damped = jtj.clone();
    for k in 0..dim {
        damped[(k, k)] += lambda;
    }
    let mut jitter = 1e-14 * damped.trace() / dim as f64;
    for attempt in 0..24 {
        if attempt > 0 {
            for k in 0..dim {
                damped[(k, k)] += jitter;
            }
            jitter *= 10.0;
        }
        if let Some(chol) = Cholesky::new(damped.clone()) {
            return Ok(chol.solve(rhs));
        }
    }
    Err(Error::Numerical(
        "damped normal system not positive definite after jitter escalation".into(),
    ))
}

/// Result of [`lm_gn_solve`].
#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub basis: SubspaceBasis,
    pub w: DMatrix<f64>,
    /// Final subspace objective `f(N)`; equals `F(w, B̂^k)`.
    pub objective: f64,
    pub iterations: usize,
    /// Damping overflowed without an accepted step; the caller treats the
    /// returned basis as converged.
    pub stalled: bool,
    /// Objective after every outer pass, starting at the initial value.
    pub objective_trace: Vec<f64>,
}

/// Damping beyond which the iteration is declared stalled.
const LAMBDA_MAX: f64 = 1e32;

/// Levenberg–Marquardt iteration on the subspace objective.
///
/// Each pass solves `(JᵀJ+λI)Δx = Jᵀr`; while the trial point fails to
/// strictly decrease the objective, `λ` is multiplied by `ρ` (ties
/// reject). An accepted step divides `λ` by `ρ`, orthonormalizes the
/// basis, and continues. Stops when the relative objective decrease over
/// one accepted step falls below `cfg.lm_tol`, the step vanishes, or
/// `cfg.lm_max_iter` passes are exhausted. The output objective never
/// exceeds the input objective.
pub fn lm_gn_solve(
    n_init: &SubspaceBasis,
    ws: &WStepWorkspace,
    cfg: &SolverConfig,
) -> Result<LmOutcome> {
    let m = ws.n_rows();
    let r = n_init.rank();
    let mut basis = n_init.clone();
    let mut lambda = cfg.lm_lambda_init;
    let mut stalled = false;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut current_obj = f64::INFINITY;

    'outer: for _ in 0..cfg.lm_max_iter {
        let sys = gauss_newton_system(&basis, ws)?;
        if trace.is_empty() {
            trace.push(sys.objective);
        }
        current_obj = sys.objective;
        iterations += 1;

        loop {
            let delta = solve_damped(&sys.jtj, &sys.jtr, lambda)?;
            if delta.norm() <= 1e-15 * basis.matrix().norm().max(1.0) {
                // Vanishing step: gradient is (numerically) zero.
                break 'outer;
            }
            let trial_mat = basis.matrix() + DMatrix::from_column_slice(m, r, delta.as_slice());
            let trial = SubspaceBasis::orthonormalize(&trial_mat)?;
            let trial_obj = subspace_objective(&trial, ws)?;
            if trial_obj < current_obj {
                lambda /= cfg.lm_rho;
                let decrease = current_obj - trial_obj;
                basis = trial;
                current_obj = trial_obj;
                trace.push(current_obj);
                if decrease < cfg.lm_tol * current_obj.max(f64::MIN_POSITIVE) {
                    break 'outer;
                }
                break;
            }
            lambda *= cfg.lm_rho;
            if lambda > LAMBDA_MAX {
                stalled = true;
                break 'outer;
            }
        }
    }

    if trace.is_empty() {
        current_obj = subspace_objective(&basis, ws)?;
        trace.push(current_obj);
    }
    let w = recover_w(&basis, ws)?;
    Ok(LmOutcome {
        basis,
        w,
        objective: current_obj,
        iterations,
        stalled,
        objective_trace: trace,
    })
}

/// Recovers the rank-`≤r` matrix from the basis: per column
/// `W_i = N·C_i = D_i⁻¹ Q_i(N) B^k_i`.
pub fn recover_w(basis: &SubspaceBasis, ws: &WStepWorkspace) -> Result<DMatrix<f64>> {
    let nmat = basis.matrix();
    let mut w = DMatrix::zeros(ws.n_rows(), ws.n_cols());
    for i in 0..ws.n_cols() {
        let fit = fit_column(nmat, ws, i)?;
        w.set_column(i, &(nmat * fit.coeffs));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::merit_f_omega;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng, m: usize, n: usize, density: f64) -> ObservedMatrix {
        loop {
            let mut entries = Vec::new();
            for i in 0..m {
                for j in 0..n {
                    if rng.random_bool(density) {
                        entries.push((i, j, rng.random_range(-2.0..2.0)));
                    }
                }
            }
            if !entries.is_empty() {
                return ObservedMatrix::new(m, n, &entries, 1e-10).unwrap();
            }
        }
    }

    fn random_basis(rng: &mut ChaCha8Rng, m: usize, r: usize) -> SubspaceBasis {
        let mat = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
        SubspaceBasis::orthonormalize(&mat).unwrap()
    }

    fn random_workspace(
        rng: &mut ChaCha8Rng,
        m: usize,
        n: usize,
    ) -> (ObservedMatrix, WStepWorkspace, DMatrix<f64>, SparseCorruption, f64) {
        let obs = random_obs(rng, m, n, 0.6);
        let w_k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let e_vals = DVector::from_fn(obs.nnz(), |_, _| {
            if rng.random_bool(0.2) {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let e = SparseCorruption::new(&obs, e_vals, obs.nnz(), 1e6).unwrap();
        let beta1 = 10f64.powf(rng.random_range(-4.0..-1.0));
        let ws = build_workspace(&obs, &w_k, &e, beta1);
        (obs, ws, w_k, e, beta1)
    }

    #[test]
    fn workspace_entries_match_formulas() {
        let obs = ObservedMatrix::new(1, 2, &[(0, 0, 2.0)], 1e-10).unwrap();
        let e = SparseCorruption::new(&obs, DVector::from_vec(vec![0.5]), 1, 10.0).unwrap();
        let w_k = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);

        let ws = build_workspace(&obs, &w_k, &e, 0.01);
        assert_relative_eq!(ws.hbar()[(0, 0)], 1.01f64.sqrt(), epsilon = 1e-12);

        let ws = build_workspace(&obs, &w_k, &e, 1.0);
        assert_relative_eq!(ws.bk()[(0, 0)], 2.5 / 2f64.sqrt(), epsilon = 1e-12);

        // Unobserved branch at a test-sized epsilon.
        let obs = ObservedMatrix::new(1, 2, &[(0, 0, 2.0)], 1e-2).unwrap();
        let e = SparseCorruption::new(&obs, DVector::from_vec(vec![0.5]), 1, 10.0).unwrap();
        let ws = build_workspace(&obs, &w_k, &e, 1.0);
        assert_relative_eq!(ws.bk()[(0, 1)], 0.01 * 3.0 / 0.02f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(ws.hbar()[(0, 1)], 0.02f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn workspace_invariants_hold_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (obs, ws, w_k, e, beta1) = random_workspace(&mut rng, 6, 5);
        let eps = obs.epsilon();
        for i in 0..6 {
            for j in 0..5 {
                if let Some(k) = obs.position(i, j) {
                    assert_relative_eq!(ws.hbar()[(i, j)], (1.0 + beta1).sqrt());
                    let expect = (obs.observed_values()[k] - e.values()[k]
                        + beta1 * w_k[(i, j)])
                        / (1.0 + beta1).sqrt();
                    assert_relative_eq!(ws.bk()[(i, j)], expect, epsilon = 1e-14);
                } else {
                    assert_relative_eq!(ws.hbar()[(i, j)], (eps + eps * beta1).sqrt());
                    let expect = eps * beta1 * w_k[(i, j)] / (eps + eps * beta1).sqrt();
                    assert_relative_eq!(ws.bk()[(i, j)], expect, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn objective_zero_when_targets_in_span() {
        // B columns built as D·N·C lie inside span(D_iN), so the projector
        // annihilates every residual.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n, r) = (6, 4, 2);
        let hbar = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.5..2.0));
        let basis = random_basis(&mut rng, m, r);
        let coeffs = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        let mut bk = DMatrix::zeros(m, n);
        for i in 0..n {
            for u in 0..m {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += hbar[(u, i)] * basis.matrix()[(u, t)] * coeffs[(t, i)];
                }
                bk[(u, i)] = acc;
            }
        }
        let ws = WStepWorkspace::from_parts(hbar, bk).unwrap();
        let f = subspace_objective(&basis, &ws).unwrap();
        assert!(f < 1e-20, "objective should vanish, got {f}");
    }

    #[test]
    fn objective_orthogonal_residual() {
        // m=2, r=1, N=e1, D=I, single column y=(0,3): contribution 9/2.
        let hbar = DMatrix::from_element(2, 1, 1.0);
        let bk = DMatrix::from_column_slice(2, 1, &[0.0, 3.0]);
        let ws = WStepWorkspace::from_parts(hbar, bk).unwrap();
        let basis =
            SubspaceBasis::from_orthonormal(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        assert_relative_eq!(subspace_objective(&basis, &ws).unwrap(), 4.5);
    }

    /// Independent evaluation of the W-step objective (the quantity the
    /// subspace form must reproduce up to an N-independent constant).
    fn eq6_merit(
        w: &DMatrix<f64>,
        obs: &ObservedMatrix,
        w_k: &DMatrix<f64>,
        e: &SparseCorruption,
        beta1: f64,
    ) -> f64 {
        let fit = merit_f_omega(w, e.values(), obs);
        let mut prox = 0.0;
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let h = obs.weight(i, j);
                let d = w[(i, j)] - w_k[(i, j)];
                prox += h * h * d * d;
            }
        }
        fit + 0.5 * beta1 * prox
    }

    #[test]
    fn subspace_form_matches_wstep_objective_up_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let m = rng.random_range(4..8);
            let n = rng.random_range(3..7);
            let r = rng.random_range(1..3usize).min(m - 1);
            let (obs, ws, w_k, e, beta1) = random_workspace(&mut rng, m, n);
            let mut diffs = Vec::new();
            for _ in 0..10 {
                let basis = random_basis(&mut rng, m, r);
                let f = subspace_objective(&basis, &ws).unwrap();
                let w = recover_w(&basis, &ws).unwrap();
                diffs.push(eq6_merit(&w, &obs, &w_k, &e, beta1) - f);
            }
            let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scale = hi.abs().max(1.0);
            assert!(
                (hi - lo) <= 1e-9 * scale,
                "constant drifts: spread {} at scale {}",
                hi - lo,
                scale
            );
        }
    }

    #[test]
    fn projector_and_gradient_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (_, ws, _, _, _) = random_workspace(&mut rng, 7, 5);
        let basis = random_basis(&mut rng, 7, 3);
        let col = 2;
        let fit = fit_column(basis.matrix(), &ws, col).unwrap();
        let m = ws.n_rows();
        let nmat = basis.matrix();
        let mut dn = DMatrix::zeros(m, 3);
        for t in 0..3 {
            for u in 0..m {
                dn[(u, t)] = ws.hbar()[(u, col)] * nmat[(u, t)];
            }
        }
        let q = &dn * &fit.gram_inv * dn.transpose();
        assert_relative_eq!(&q * &q, q.clone(), epsilon = 1e-10);
        assert_relative_eq!(q.transpose(), q.clone(), epsilon = 1e-10);
        assert!((&q * &fit.resid).norm() < 1e-10);
        // A_iᵀ r_i = G (DN)ᵀ r
        let a_t_r = &fit.gram_inv * dn.transpose() * &fit.resid;
        assert!(a_t_r.norm() < 1e-10);
        // and A_iᵀ y_i equals the coefficient vector.
        let a_t_y = &fit.gram_inv * dn.transpose() * ws.bk().column(col);
        assert_relative_eq!(a_t_y, fit.coeffs, epsilon = 1e-10);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (m, n, r) = (5, 4, 2);
        let hbar = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.5..2.0));
        let basis = random_basis(&mut rng, m, r);
        let coeffs = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        let mut bk = DMatrix::zeros(m, n);
        for i in 0..n {
            for u in 0..m {
                for t in 0..r {
                    bk[(u, i)] += hbar[(u, i)] * basis.matrix()[(u, t)] * coeffs[(t, i)];
                }
            }
        }
        let ws = WStepWorkspace::from_parts(hbar, bk).unwrap();
        let sys = gauss_newton_system(&basis, &ws).unwrap();
        assert!(sys.jtr.norm() < 1e-10);
    }

    #[test]
    fn normal_matrix_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let m = rng.random_range(3..7);
            let n = rng.random_range(3..6);
            let r = rng.random_range(1..3usize).min(m - 1);
            let (_, ws, _, _, _) = random_workspace(&mut rng, m, n);
            let basis = random_basis(&mut rng, m, r);
            let sys = gauss_newton_system(&basis, &ws).unwrap();
            let scale = sys.jtj.amax().max(1.0);
            let asym = (&sys.jtj - sys.jtj.transpose()).amax();
            assert!(asym <= 1e-12 * scale, "asymmetry {asym}");
            let eig = SymmetricEigen::new(sys.jtj.clone());
            let min_eig = eig.eigenvalues.min();
            // absolute cushion covers numerically-zero systems at
            // near-optimal bases
            assert!(
                min_eig >= -1e-10 * sys.jtj.norm() - 1e-12,
                "negative eigenvalue {min_eig} at norm {}",
                sys.jtj.norm()
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let m = rng.random_range(4..7);
            let n = rng.random_range(3..6);
            let r = 2.min(m - 1);
            let (_, ws, _, _, _) = random_workspace(&mut rng, m, n);
            let basis = random_basis(&mut rng, m, r);
            let sys = gauss_newton_system(&basis, &ws).unwrap();
            let h = 1e-6;
            for _ in 0..4 {
                let dir: DMatrix<f64> = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
                let dir = &dir / dir.norm();
                let plus = basis.matrix() + &dir * h;
                let minus = basis.matrix() - &dir * h;
                let fd = (subspace_objective_mat(&plus, &ws).unwrap()
                    - subspace_objective_mat(&minus, &ws).unwrap())
                    / (2.0 * h);
                // grad f = −Jᵀr under the residual convention r = y − f(x)
                let mut analytic = 0.0;
                for p in 0..r {
                    for u in 0..m {
                        analytic -= sys.jtr[p * m + u] * dir[(u, p)];
                    }
                }
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom < 1e-5,
                    "fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn lm_converges_in_one_pass_at_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (m, n, r) = (5, 4, 2);
        let hbar = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.5..2.0));
        let basis = random_basis(&mut rng, m, r);
        let coeffs = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        let mut bk = DMatrix::zeros(m, n);
        for i in 0..n {
            for u in 0..m {
                for t in 0..r {
                    bk[(u, i)] += hbar[(u, i)] * basis.matrix()[(u, t)] * coeffs[(t, i)];
                }
            }
        }
        let ws = WStepWorkspace::from_parts(hbar, bk).unwrap();
        let obs = ObservedMatrix::new(m, n, &[(0, 0, 1.0)], 1e-10).unwrap();
        let cfg = SolverConfig::for_problem(&obs, 1).unwrap();
        let out = lm_gn_solve(&basis, &ws, &cfg).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(!out.stalled);
        assert_eq!(out.basis.matrix(), basis.matrix());
    }

    #[test]
    fn lm_recovers_fully_observed_noiseless_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (m, n, r) = (20, 30, 3);
        let u = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let truth = &u * v.transpose();
        let mut entries = Vec::new();
        for i in 0..m {
            for j in 0..n {
                entries.push((i, j, truth[(i, j)]));
            }
        }
        let obs = ObservedMatrix::new(m, n, &entries, 1e-10).unwrap();
        let e = SparseCorruption::zeros(&obs, 1, 1.0);
        let ws = build_workspace(&obs, &DMatrix::zeros(m, n), &e, 1e-12);
        let mut cfg = SolverConfig::for_problem(&obs, r).unwrap();
        cfg.lm_max_iter = 200;
        let init = random_basis(&mut rng, m, r);
        let out = lm_gn_solve(&init, &ws, &cfg).unwrap();
        let rmse = (&out.w - &truth).norm() / ((m * n) as f64).sqrt();
        assert!(rmse < 1e-8, "rmse {rmse}");
    }

    #[test]
    fn lm_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..50 {
            let m = rng.random_range(4..8);
            let n = rng.random_range(3..7);
            let r = rng.random_range(1..3usize).min(m - 1);
            let (obs, ws, _, _, _) = random_workspace(&mut rng, m, n);
            let basis = random_basis(&mut rng, m, r);
            let mut cfg = SolverConfig::for_problem(&obs, r).unwrap();
            cfg.lm_max_iter = 30;
            let out = lm_gn_solve(&basis, &ws, &cfg).unwrap();
            for pair in out.objective_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-15, "trace increased: {pair:?}");
            }
            assert!(out.objective <= out.objective_trace[0] + 1e-15);
        }
    }

    #[test]
    fn recover_w_is_identity_on_spanned_targets() {
        // D = I and N spans the target's column space: W = B̂ = B.
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (m, n, r) = (5, 4, 2);
        let basis = random_basis(&mut rng, m, r);
        let coeffs = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        let bk = basis.matrix() * coeffs;
        let hbar = DMatrix::from_element(m, n, 1.0);
        let ws = WStepWorkspace::from_parts(hbar, bk.clone()).unwrap();
        let w = recover_w(&basis, &ws).unwrap();
        assert_relative_eq!(w, bk, epsilon = 1e-12);
    }

    #[test]
    fn recover_w_projects_coordinates() {
        // r=1, N=e1, D=I, column (2,5) → (2,0).
        let hbar = DMatrix::from_element(2, 1, 1.0);
        let bk = DMatrix::from_column_slice(2, 1, &[2.0, 5.0]);
        let ws = WStepWorkspace::from_parts(hbar, bk).unwrap();
        let basis =
            SubspaceBasis::from_orthonormal(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let w = recover_w(&basis, &ws).unwrap();
        assert_relative_eq!(w[(0, 0)], 2.0);
        assert_relative_eq!(w[(1, 0)], 0.0);
    }

    #[test]
    fn recovered_matrix_has_bounded_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let m = rng.random_range(4..8);
            let n = rng.random_range(4..8);
            let r = rng.random_range(1..3usize).min(m.min(n) - 1);
            let (_, ws, _, _, _) = random_workspace(&mut rng, m, n);
            let basis = random_basis(&mut rng, m, r);
            let w = recover_w(&basis, &ws).unwrap();
            let svals = w.singular_values();
            if svals.len() > r {
                assert!(
                    svals[r] / svals[0].max(1e-300) < 1e-10,
                    "rank exceeds {r}: {svals:?}"
                );
            }
        }
    }
}

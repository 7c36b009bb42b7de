//! Quadratic majorization of the W-step and its closed-form global
//! minimizer, used as the convergence safeguard.
//!
//! For positive vectors `p`, `q` with `H̄_ij² ≤ p_i q_j`, the objective
//! `F(W, B̂^k) = ½‖H̄∘(W−B̂^k)‖²` is bounded above by the separable
//! quadratic
//!
//! ```text
//! Q̂(W) = F(W^k) + ⟨G^k, W−W^k⟩ + ½⟨W−W^k, P(W−W^k)Q⟩
//!      = ½‖P^½ W Q^½ − U^k‖² − ½‖P^-½ G^k Q^-½‖² + F(W^k)
//! ```
//!
//! with `G^k = ∇F(W^k) = (H̄∘H̄)∘(W^k−B̂^k)`, `P = diag(p)`, `Q = diag(q)`
//! and `U^k = P^½W^kQ^½ − P^-½G^kQ^-½`. Its global minimizer over
//! `rank(W) ≤ r` is `P^-½·Π_r(U^k)·Q^-½` where `Π_r` truncates the SVD.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::wstep::WStepWorkspace;

/// Row/column majorization weights. `maj_p` carries the `(1+δ)` inflation
/// that makes the domination strict, as the convergence argument requires
/// `M ≻ A*A + S` rather than `⪰`.
#[derive(Debug, Clone)]
pub struct MajorizationWeights {
    maj_p: Vec<f64>,
    maj_q: Vec<f64>,
    inflation: f64,
}

pub const DEFAULT_INFLATION: f64 = 1e-6;

impl MajorizationWeights {
    pub fn maj_p(&self) -> &[f64] {
        &self.maj_p
    }

    pub fn maj_q(&self) -> &[f64] {
        &self.maj_q
    }

    pub fn inflation(&self) -> f64 {
        self.inflation
    }
}

/// Row maxima (inflated by `1+δ`) and column maxima of `H̄`:
/// `p_i = (1+δ)·max_j H̄_ij`, `q_j = max_i H̄_ij`, which gives
/// `p_i q_j > H̄_ij²` everywhere.
pub fn compute_weights(hbar: &DMatrix<f64>) -> MajorizationWeights {
    compute_weights_with_inflation(hbar, DEFAULT_INFLATION)
}

pub fn compute_weights_with_inflation(hbar: &DMatrix<f64>, inflation: f64) -> MajorizationWeights {
    assert!(hbar.iter().all(|&h| h > 0.0), "weights must be positive");
    let (m, n) = hbar.shape();
    let mut maj_p = vec![0.0f64; m];
    let mut maj_q = vec![0.0f64; n];
    for j in 0..n {
        for i in 0..m {
            let h = hbar[(i, j)];
            maj_p[i] = maj_p[i].max(h);
            maj_q[j] = maj_q[j].max(h);
        }
    }
    for p in &mut maj_p {
        *p *= 1.0 + inflation;
    }
    MajorizationWeights {
        maj_p,
        maj_q,
        inflation,
    }
}

/// Best rank-`r` approximation `U_r Σ_r V_rᵀ` from the top `r` triplets of
/// a deterministic SVD (descending singular values; ties keep the order
/// the decomposition returns).
pub fn truncated_svd_rank_r(mat: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    assert!(r <= mat.nrows().min(mat.ncols()), "rank exceeds dimensions");
    let svd = mat.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let k = r.min(svd.singular_values.len());
    let mut out = DMatrix::zeros(mat.nrows(), mat.ncols());
    for t in 0..k {
        let s = svd.singular_values[t];
        if s == 0.0 {
            break;
        }
        // out += s * u_t v_tᵀ
        let ut = u.column(t);
        let vtt = vt.row(t);
        for j in 0..mat.ncols() {
            let sv = s * vtt[j];
            for i in 0..mat.nrows() {
                out[(i, j)] += ut[i] * sv;
            }
        }
    }
    out
}

/// Gradient `G^k = (H̄∘H̄)∘(W^k − B̂^k)` of `F(·, B̂^k)` at `W^k`.
fn gradient(w_k: &DMatrix<f64>, ws: &WStepWorkspace) -> DMatrix<f64> {
    let mut g = w_k - ws.bhat();
    g.zip_apply(ws.hbar(), |gij, h| *gij *= h * h);
    g
}

/// Closed-form global minimizer of the quadratic majorization over
/// `rank(W) ≤ r`: scales, truncates the SVD, and unscales. Exact, not
/// iterative; a repeated call returns bit-identical output.
pub fn majorized_minimizer(
    w_k: &DMatrix<f64>,
    ws: &WStepWorkspace,
    wts: &MajorizationWeights,
    r: usize,
) -> Result<DMatrix<f64>> {
    let (m, n) = (ws.n_rows(), ws.n_cols());
    if w_k.nrows() != m || w_k.ncols() != n {
        return Err(Error::Dimension(format!(
            "iterate is {}x{}, workspace is {m}x{n}",
            w_k.nrows(),
            w_k.ncols()
        )));
    }
    let g = gradient(w_k, ws);
    let sp: Vec<f64> = wts.maj_p.iter().map(|p| p.sqrt()).collect();
    let sq: Vec<f64> = wts.maj_q.iter().map(|q| q.sqrt()).collect();
    let u_k = DMatrix::from_fn(m, n, |i, j| {
        let scale = sp[i] * sq[j];
        scale * w_k[(i, j)] - g[(i, j)] / scale
    });
    let mut truncated = truncated_svd_rank_r(&u_k, r);
    if truncated.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SVD produced non-finite values".into()));
    }
    for j in 0..n {
        for i in 0..m {
            truncated[(i, j)] /= sp[i] * sq[j];
        }
    }
    Ok(truncated)
}

/// Value of the majorization `Q̂(W)` built at `W^k`; satisfies
/// `F(W, B̂^k) ≤ Q̂(W)` for all `W` and `Q̂(W^k) = F(W^k, B̂^k)`.
pub fn majorization_value(
    w: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    ws: &WStepWorkspace,
    wts: &MajorizationWeights,
) -> f64 {
    let g = gradient(w_k, ws);
    let mut linear = 0.0;
    let mut quad = 0.0;
    for j in 0..ws.n_cols() {
        for i in 0..ws.n_rows() {
            let d = w[(i, j)] - w_k[(i, j)];
            linear += g[(i, j)] * d;
            quad += wts.maj_p[i] * wts.maj_q[j] * d * d;
        }
    }
    ws.merit(w_k) + linear + 0.5 * quad
}

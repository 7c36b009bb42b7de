//! Corruption-detection boosters used between the W- and E-steps while
//! the shrinking threshold `η` stays above its floor `η0`.
//!
//! With the subspace basis `N` held fixed, the joint fit
//!
//! ```text
//! min_{C,E} ½‖H∘(N·C − Ŵ + E)‖² + η0‖E‖₁
//! ```
//!
//! decouples per column into a Huber-loss regression (knee `η0/H_ij` on
//! the weighted residual), solved here by exact alternation: a weighted
//! least-squares step on the column coefficients and a closed-form
//! soft-threshold step on the column of `E`. Optional iterative
//! reweighting scales per-entry knees inversely to the previous pass's
//! fit residual, which counteracts the magnitude shrinkage of the `l1`
//! penalty and enhances sparsity.
//!
//! The `η` gate drives both heuristics: each outer iteration shrinks `η`
//! geometrically, the Huber refit runs only while `η > η0`, and E-step
//! entries smaller than `η` are zeroed in that phase. The gate reaches
//! its floor in finitely many iterations, after which the plain
//! alternation (and its convergence guarantee) takes over.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::core::{median_abs, ObservedMatrix, SubspaceBasis};
use crate::error::{Error, Result};

/// Parameters of the Huber booster.
#[derive(Debug, Clone)]
pub struct HuberConfig {
    /// `l1` penalty weight and gate floor `η0`.
    pub eta0: f64,
    /// Geometric decay of the gate threshold per outer iteration.
    pub eta_shrink: f64,
    /// Reweighting passes (1 = plain Huber regression).
    pub l_max: usize,
    /// Floor on residual magnitudes when forming reweighting factors.
    pub reweight_floor: f64,
    /// Cap on the per-column alternation count.
    pub inner_iters: usize,
}

impl HuberConfig {
    pub fn new(eta0: f64) -> Self {
        Self {
            eta0,
            eta_shrink: 0.8,
            l_max: 3,
            reweight_floor: 1e-4,
            inner_iters: 200,
        }
    }
}

/// Standard Huber loss with knee `δ`: quadratic inside, linear outside.
pub fn huber_value(z: f64, knee: f64) -> f64 {
    assert!(knee > 0.0, "knee must be positive");
    let a = z.abs();
    if a <= knee {
        0.5 * z * z
    } else {
        knee * a - 0.5 * knee * knee
    }
}

/// Result of one regression pass: coefficients `C` (`r×n`) and the
/// absorbed corruption estimate (dense, zero off `Ω`).
type RegressionOutput = (DMatrix<f64>, DMatrix<f64>);

/// Joint `(C, E)` fit against the fixed basis with uniform `l1` weight
/// `cfg.eta0`. The per-column objective is nonincreasing across the inner
/// alternations.
pub fn huber_regression(
    basis: &SubspaceBasis,
    obs: &ObservedMatrix,
    cfg: &HuberConfig,
) -> Result<RegressionOutput> {
    let unit = DVector::from_element(obs.nnz(), 1.0);
    huber_regression_weighted(basis, obs, cfg, &unit)
}

/// As [`huber_regression`] with per-entry knee scales over `Ω` (canonical
/// order): entry `(i,j)` is penalized at `cfg.eta0 · scale_ij`.
fn huber_regression_weighted(
    basis: &SubspaceBasis,
    obs: &ObservedMatrix,
    cfg: &HuberConfig,
    knee_scale: &DVector<f64>,
) -> Result<RegressionOutput> {
    let (m, n) = (obs.n_rows(), obs.n_cols());
    let r = basis.rank();
    if basis.ambient_dim() != m {
        return Err(Error::Dimension(format!(
            "basis has {} rows, data has {m}",
            basis.ambient_dim()
        )));
    }
    if !(cfg.eta0 > 0.0) {
        return Err(Error::Parameter("eta0 must be positive".into()));
    }
    let nmat = basis.matrix();
    let eps = obs.epsilon();

    // Per-column observed row lists in canonical order.
    let mut rows_by_col: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, &(i, j)) in obs.support().iter().enumerate() {
        rows_by_col[j].push((i, k));
    }

    let mut coeffs = DMatrix::zeros(r, n);
    let mut e_out = DMatrix::zeros(m, n);

    for j in 0..n {
        // NᵀD²N for this column: ε everywhere, 1 on observed rows.
        let mut gram = nmat.transpose() * nmat * eps;
        for &(i, _) in &rows_by_col[j] {
            let row = nmat.row(i);
            for a in 0..r {
                for b in 0..r {
                    gram[(a, b)] += (1.0 - eps) * row[a] * row[b];
                }
            }
        }
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::Numerical(format!("degenerate Huber column {j}: NᵀD²N singular"))
        })?;

        // target t = ŵ − e; off-support entries are structurally 0 and
        // never enter e, so only observed rows contribute to the RHS
        // (their weight is exactly 1).
        let mut e_col = vec![0.0f64; rows_by_col[j].len()];
        let mut c = DVector::zeros(r);
        let mut last_obj = f64::INFINITY;
        for _ in 0..cfg.inner_iters.max(1) {
            // C-step: weighted least squares against ŵ − e.
            let mut rhs = DVector::zeros(r);
            for (idx, &(i, k)) in rows_by_col[j].iter().enumerate() {
                let t = obs.observed_values()[k] - e_col[idx];
                let row = nmat.row(i);
                for a in 0..r {
                    rhs[a] += row[a] * t;
                }
            }
            c = chol.solve(&rhs);
            let fitted = nmat * &c;

            // E-step: soft threshold of the raw residual at the per-entry
            // knee η_ij (weight 1 on Ω, so the threshold is η_ij itself).
            let mut obj = 0.5 * eps * fitted.norm_squared();
            for (idx, &(i, k)) in rows_by_col[j].iter().enumerate() {
                obj -= 0.5 * eps * fitted[i] * fitted[i];
                let v = fitted[i] - obs.observed_values()[k];
                let knee = cfg.eta0 * knee_scale[k];
                e_col[idx] = -crate::init_apg::soft_threshold_scalar(v, knee);
                let resid = v + e_col[idx];
                obj += 0.5 * resid * resid + knee * e_col[idx].abs();
            }

            if (last_obj - obj).abs() <= 1e-12 * obj.abs().max(1.0) {
                break;
            }
            last_obj = obj;
        }

        coeffs.set_column(j, &c);
        for (idx, &(i, _)) in rows_by_col[j].iter().enumerate() {
            e_out[(i, j)] = e_col[idx];
        }
    }
    Ok((coeffs, e_out))
}

/// Iteratively reweighted Huber regression: `l_max` passes, each scaling
/// per-entry knees by `1/max(|fit residual|, reweight_floor)` from the
/// previous pass, normalized to unit median. Returns the `(C, E)` of each
/// pass, last one final.
pub fn reweighted_huber_trace(
    basis: &SubspaceBasis,
    obs: &ObservedMatrix,
    cfg: &HuberConfig,
) -> Result<Vec<RegressionOutput>> {
    let mut scale = DVector::from_element(obs.nnz(), 1.0);
    let mut trace = Vec::with_capacity(cfg.l_max.max(1));
    for pass in 0..cfg.l_max.max(1) {
        let out = huber_regression_weighted(basis, obs, cfg, &scale)?;
        let is_last = pass + 1 == cfg.l_max.max(1);
        if !is_last {
            let fitted = basis.matrix() * &out.0;
            let mut weights = Vec::with_capacity(obs.nnz());
            for (k, &(i, j)) in obs.support().iter().enumerate() {
                let resid = obs.observed_values()[k] - fitted[(i, j)];
                weights.push(1.0 / resid.abs().max(cfg.reweight_floor));
            }
            let med = median_abs(&weights);
            if med > 0.0 {
                for w in &mut weights {
                    *w /= med;
                }
            }
            scale = DVector::from_vec(weights);
        }
        trace.push(out);
    }
    Ok(trace)
}

/// Final pass of [`reweighted_huber_trace`].
pub fn reweighted_huber(
    basis: &SubspaceBasis,
    obs: &ObservedMatrix,
    cfg: &HuberConfig,
) -> Result<RegressionOutput> {
    let mut trace = reweighted_huber_trace(basis, obs, cfg)?;
    Ok(trace.pop().expect("at least one pass"))
}

/// Decision of the shrinking-threshold gate for one outer iteration.
#[derive(Debug, Clone, Copy)]
pub struct EtaGate {
    /// Run the Huber refit this iteration.
    pub use_huber: bool,
    /// Threshold for the next iteration.
    pub eta_next: f64,
    /// Minimum magnitude kept in the E-step while the gate is active.
    pub gate_threshold: f64,
}

/// Gate: the heuristics run only while `η > η0`, `η` decays by
/// `eta_shrink` each iteration, and E-step entries below `η` are zeroed
/// during the active phase.
pub fn eta_gate(eta_current: f64, eta_floor: f64, eta_shrink: f64) -> EtaGate {
    assert!(eta_current >= 0.0);
    EtaGate {
        use_huber: eta_current > eta_floor,
        eta_next: eta_shrink * eta_current,
        gate_threshold: eta_current,
    }
}

//! Reproducible synthetic benchmark problems and evaluation metrics.
//!
//! Ground truth is `W* = U·Vᵀ` with i.i.d. uniform `[−1,1]` factors,
//! optionally respaced to an ill-conditioned spectrum (`σ_i ∝ 1/α^i`,
//! Frobenius norm preserved). A uniform random fraction of the entries is
//! observed, a fraction of the *observed* entries receives uniform gross
//! corruptions, and Gaussian noise is added to every observed entry.
//! Everything derives from one seed, so instances are byte-identical
//! across runs and platforms.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::core::{ObservedMatrix, SolverConfig, DEFAULT_EPSILON};
use crate::driver::parsumi_solve;
use crate::error::{Error, Result};
use crate::init_apg::{continuation_init, ApgConfig};

/// Parameters of one synthetic problem.
#[derive(Debug, Clone, Serialize)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    /// Fraction of all entries hidden, in `[0,1)`.
    pub missing_fraction: f64,
    /// Fraction of the *observed* entries corrupted, in `[0,1]`.
    pub corruption_fraction: f64,
    pub corruption_range: (f64, f64),
    pub noise_sigma: f64,
    /// `α` of the spectrum respacing `σ_i ∝ 1/α^i`; values `≤ 1` leave the
    /// spectrum alone.
    pub decay_exponent: f64,
    pub seed: u64,
}

/// Generated problem: observations plus the ground truth pair.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub obs: ObservedMatrix,
    pub w_true: DMatrix<f64>,
    pub e_true: DMatrix<f64>,
}

impl SyntheticInstance {
    pub fn observed_count(&self) -> usize {
        self.obs.nnz()
    }

    pub fn corrupted_count(&self) -> usize {
        self.e_true.iter().filter(|v| **v != 0.0).count()
    }
}

/// Generates the instance described by `spec`, deterministically from its
/// seed.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    let SyntheticSpec { m, n, rank, .. } = *spec;
    if m == 0 || n == 0 || rank == 0 || rank > m.min(n) {
        return Err(Error::Parameter(format!(
            "infeasible shape {m}x{n} rank {rank}"
        )));
    }
    if !(0.0..1.0).contains(&spec.missing_fraction) {
        return Err(Error::Parameter(format!(
            "missing fraction {} outside [0,1)",
            spec.missing_fraction
        )));
    }
    if !(0.0..=1.0).contains(&spec.corruption_fraction) {
        return Err(Error::Parameter(format!(
            "corruption fraction {} outside [0,1]",
            spec.corruption_fraction
        )));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Parameter("noise sigma must be nonnegative".into()));
    }
    if spec.corruption_fraction > 0.0 && spec.corruption_range.0 >= spec.corruption_range.1 {
        return Err(Error::Parameter("empty corruption range".into()));
    }
    let observed_count = ((1.0 - spec.missing_fraction) * (m * n) as f64).round() as usize;
    if observed_count == 0 {
        return Err(Error::Parameter("no entries would be observed".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut u = DMatrix::zeros(m, rank);
    for j in 0..rank {
        for i in 0..m {
            u[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut v = DMatrix::zeros(n, rank);
    for j in 0..rank {
        for i in 0..n {
            v[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut w_true = &u * v.transpose();

    if spec.decay_exponent > 1.0 {
        w_true = respace_spectrum(&w_true, rank, spec.decay_exponent);
    }

    // Ω: uniform without replacement over flat column-major indices.
    let mut omega = rand::seq::index::sample(&mut rng, m * n, observed_count).into_vec();
    omega.sort_unstable();

    // Corruption support: uniform within Ω.
    let corrupted_count = (spec.corruption_fraction * observed_count as f64).round() as usize;
    let mut corrupt_pos =
        rand::seq::index::sample(&mut rng, observed_count, corrupted_count).into_vec();
    corrupt_pos.sort_unstable();

    let mut e_true = DMatrix::zeros(m, n);
    let (lo, hi) = spec.corruption_range;
    for &pos in &corrupt_pos {
        let flat = omega[pos];
        let (i, j) = (flat % m, flat / m);
        e_true[(i, j)] = rng.random_range(lo..hi);
    }

    let noise = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Parameter(format!("bad noise sigma: {e}")))?;
        (0..observed_count)
            .map(|_| normal.sample(&mut rng))
            .collect()
    } else {
        vec![0.0; observed_count]
    };

    let mut entries = Vec::with_capacity(observed_count);
    for (k, &flat) in omega.iter().enumerate() {
        let (i, j) = (flat % m, flat / m);
        entries.push((i, j, w_true[(i, j)] + e_true[(i, j)] + noise[k]));
    }
    let obs = ObservedMatrix::new(m, n, &entries, DEFAULT_EPSILON)?;
    Ok(SyntheticInstance {
        obs,
        w_true,
        e_true,
    })
}

/// Rescales the leading `rank` singular values to `1/α^i` (i = 1..rank),
/// preserving the Frobenius norm.
fn respace_spectrum(w: &DMatrix<f64>, rank: usize, alpha: f64) -> DMatrix<f64> {
    let svd = w.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let old_norm = svd
        .singular_values
        .iter()
        .take(rank)
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    let shaped: Vec<f64> = (1..=rank).map(|i| alpha.powi(-(i as i32))).collect();
    let shaped_norm = shaped.iter().map(|s| s * s).sum::<f64>().sqrt();
    let scale = old_norm / shaped_norm;
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    for t in 0..rank.min(svd.singular_values.len()) {
        let s = shaped[t] * scale;
        let ut = u.column(t);
        let vtt = vt.row(t);
        for j in 0..w.ncols() {
            let sv = s * vtt[j];
            for i in 0..w.nrows() {
                out[(i, j)] += ut[i] * sv;
            }
        }
    }
    out
}

/// `‖A − B‖_F / sqrt(mn)`.
pub fn rmse(recovered: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    assert_eq!(recovered.shape(), truth.shape());
    let (m, n) = recovered.shape();
    (recovered - truth).norm() / ((m * n) as f64).sqrt()
}

/// `‖P_Ω(W − Ŵ)‖ / sqrt(|Ω|)`; residual against the *observed* data.
pub fn rmse_visible(recovered: &DMatrix<f64>, obs: &ObservedMatrix) -> Result<f64> {
    if obs.nnz() == 0 {
        return Err(Error::Parameter(
            "visible RMSE undefined on empty support".into(),
        ));
    }
    let mut acc = 0.0;
    for (k, &(i, j)) in obs.support().iter().enumerate() {
        let d = recovered[(i, j)] - obs.observed_values()[k];
        acc += d * d;
    }
    Ok((acc / obs.nnz() as f64).sqrt())
}

/// Oracle noise floor `σ·sqrt((m+n−r)·r / (p−e))` with `p` observed and
/// `e` corrupted entries: the reference the benchmark measures against.
pub fn oracle_rmse(
    m: usize,
    n: usize,
    r: usize,
    observed_count: usize,
    corrupted_count: usize,
    sigma: f64,
) -> Result<f64> {
    if observed_count <= corrupted_count {
        return Err(Error::Parameter(format!(
            "need more observed ({observed_count}) than corrupted ({corrupted_count}) entries"
        )));
    }
    if (m + n).saturating_sub(r) == 0 || r == 0 {
        return Err(Error::Parameter("degenerate dimensions for oracle".into()));
    }
    let dof = ((m + n - r) * r) as f64;
    Ok(sigma * (dof / (observed_count - corrupted_count) as f64).sqrt())
}

/// Entries with magnitude above this count as support for the F-measure.
const SUPPORT_EPS: f64 = 1e-9;

/// Harmonic mean of support precision and recall; two empty supports
/// score 1.
pub fn support_f_measure(e_recovered: &DMatrix<f64>, e_true: &DMatrix<f64>) -> f64 {
    assert_eq!(e_recovered.shape(), e_true.shape());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (rec, truth) in e_recovered.iter().zip(e_true.iter()) {
        let r = rec.abs() > SUPPORT_EPS;
        let t = truth.abs() > SUPPORT_EPS;
        match (r, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Which recovery pipeline a benchmark trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolverKind {
    /// Full pipeline: convex initialization + alternating refinement.
    Parsumi,
    /// Convex initialization alone (rank-truncated).
    ApgOnly,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Parsumi => "parsumi",
            SolverKind::ApgOnly => "apg-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "parsumi" => Ok(SolverKind::Parsumi),
            "apg-only" | "apg" => Ok(SolverKind::ApgOnly),
            other => Err(Error::Parameter(format!("unknown solver '{other}'"))),
        }
    }
}

/// Grid of missing-data and corruption fractions, with the shared shape
/// and noise level of every cell.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseGridSpec {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub missing_fractions: Vec<f64>,
    pub corruption_fractions: Vec<f64>,
    pub sigma: f64,
    pub corruption_range: (f64, f64),
    pub trials: usize,
    pub master_seed: u64,
}

impl PhaseGridSpec {
    /// The grid of the published benchmark: 40×60 rank-4, σ = 0.01,
    /// corruptions in `[−2,2]`, missing 0–80% by 10, corruption 0–20% by
    /// 5, 10 trials per cell.
    pub fn default_benchmark(master_seed: u64) -> Self {
        Self {
            m: 40,
            n: 60,
            rank: 4,
            missing_fractions: (0..=8).map(|k| k as f64 * 0.1).collect(),
            corruption_fractions: (0..=4).map(|k| k as f64 * 0.05).collect(),
            sigma: 0.01,
            corruption_range: (-2.0, 2.0),
            trials: 10,
            master_seed,
        }
    }
}

/// One trial's outcome; `rmse` is NaN when the solver failed.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub missing_frac: f64,
    pub corrupt_frac: f64,
    pub sigma: f64,
    pub trial: usize,
    pub rmse: f64,
    pub rmse_visible: f64,
    pub oracle: f64,
    pub success: bool,
    pub iters: usize,
    pub safeguards: usize,
    pub seconds: f64,
    pub solver: SolverKind,
}

/// Aggregates of one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub missing_frac: f64,
    pub corrupt_frac: f64,
    pub mean_excess: f64,
    pub median_excess: f64,
    pub success_rate: f64,
    pub mean_iters: f64,
}

/// SplitMix64 step, used to derive independent per-trial seeds.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for `(cell, trial)`, independent of scheduling order.
pub fn derive_seed(master_seed: u64, cell_index: usize, trial_index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ cell_index as u64) ^ trial_index as u64)
}

/// A trial succeeds when its RMSE is within 3x the oracle bound, or below
/// 1e-3 in the noiseless case where the bound is zero.
pub fn trial_success(rmse: f64, oracle: f64) -> bool {
    if !rmse.is_finite() {
        return false;
    }
    if oracle > 0.0 {
        rmse <= 3.0 * oracle
    } else {
        rmse < 1e-3
    }
}

fn run_trial(
    grid: &PhaseGridSpec,
    solver: SolverKind,
    cell_index: usize,
    missing: f64,
    corrupt: f64,
    trial: usize,
) -> TrialRecord {
    let seed = derive_seed(grid.master_seed, cell_index, trial);
    let start = std::time::Instant::now();
    let spec = SyntheticSpec {
        m: grid.m,
        n: grid.n,
        rank: grid.rank,
        missing_fraction: missing,
        corruption_fraction: corrupt,
        corruption_range: grid.corruption_range,
        noise_sigma: grid.sigma,
        decay_exponent: 0.0,
        seed,
    };
    let mut record = TrialRecord {
        missing_frac: missing,
        corrupt_frac: corrupt,
        sigma: grid.sigma,
        trial,
        rmse: f64::NAN,
        rmse_visible: f64::NAN,
        oracle: f64::NAN,
        success: false,
        iters: 0,
        safeguards: 0,
        seconds: 0.0,
        solver,
    };
    let inst = match generate(&spec) {
        Ok(inst) => inst,
        Err(_) => return record,
    };
    let corrupted = inst.corrupted_count();
    record.oracle = oracle_rmse(
        grid.m,
        grid.n,
        grid.rank,
        inst.observed_count(),
        corrupted,
        grid.sigma,
    )
    .unwrap_or(f64::NAN);

    // Corruption budget follows the benchmark protocol: 120% of the true
    // corruption count.
    let n0 = ((corrupted as f64) * 1.2).ceil() as usize;
    let cfg = match SolverConfig::for_problem_with_n0(&inst.obs, grid.rank, n0) {
        Ok(cfg) => cfg,
        Err(_) => return record,
    };

    let solved = match solver {
        SolverKind::Parsumi => parsumi_solve(&inst.obs, &cfg, None)
            .map(|out| (out.w, out.report.iterations, out.report.safeguard_activations)),
        SolverKind::ApgOnly => {
            let apg = ApgConfig::for_shape(grid.m, grid.n);
            continuation_init(&inst.obs, grid.rank, cfg.n0, cfg.k_e, &apg)
                .map(|out| (out.w0, out.total_iterations, 0))
        }
    };
    if let Ok((w, iters, safeguards)) = solved {
        record.rmse = rmse(&w, &inst.w_true);
        record.rmse_visible = rmse_visible(&w, &inst.obs).unwrap_or(f64::NAN);
        record.iters = iters;
        record.safeguards = safeguards;
        record.success = trial_success(record.rmse, record.oracle);
    }
    record.seconds = start.elapsed().as_secs_f64();
    record
}

/// Runs every `(cell, trial)` of the grid, in parallel when a thread count
/// allows it. Each trial's seed depends only on `(master_seed, cell,
/// trial)`, so results are independent of scheduling; rows come back in
/// deterministic cell-major order. Per-trial solver failures are recorded
/// as NaN rows, not raised.
pub fn phase_diagram(
    grid: &PhaseGridSpec,
    solver: SolverKind,
    threads: Option<usize>,
) -> Result<Vec<TrialRecord>> {
    if grid.trials == 0 {
        return Err(Error::Parameter("need at least one trial per cell".into()));
    }
    let mut tasks = Vec::new();
    let mut cell_index = 0usize;
    for &missing in &grid.missing_fractions {
        for &corrupt in &grid.corruption_fractions {
            for trial in 0..grid.trials {
                tasks.push((cell_index, missing, corrupt, trial));
            }
            cell_index += 1;
        }
    }

    let run_all = || -> Vec<TrialRecord> {
        tasks
            .par_iter()
            .map(|&(cell, missing, corrupt, trial)| {
                run_trial(grid, solver, cell, missing, corrupt, trial)
            })
            .collect()
    };

    let records = match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
            pool.install(run_all)
        }
        None => run_all(),
    };
    Ok(records)
}

/// Per-cell aggregation of [`phase_diagram`] rows: mean and median of
/// `rmse − oracle`, success rate, mean iteration count.
pub fn summarize(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for rec in records {
        if !cells.contains(&(rec.missing_frac, rec.corrupt_frac)) {
            cells.push((rec.missing_frac, rec.corrupt_frac));
        }
    }
    cells
        .into_iter()
        .map(|(missing, corrupt)| {
            let mut excesses: Vec<f64> = records
                .iter()
                .filter(|r| r.missing_frac == missing && r.corrupt_frac == corrupt)
                .map(|r| r.rmse - r.oracle)
                .collect();
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.missing_frac == missing && r.corrupt_frac == corrupt)
                .collect();
            excesses.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let k = excesses.len();
            let median = if k == 0 {
                f64::NAN
            } else if k % 2 == 1 {
                excesses[k / 2]
            } else {
                0.5 * (excesses[k / 2 - 1] + excesses[k / 2])
            };
            CellSummary {
                missing_frac: missing,
                corrupt_frac: corrupt,
                mean_excess: excesses.iter().sum::<f64>() / k.max(1) as f64,
                median_excess: median,
                success_rate: group.iter().filter(|r| r.success).count() as f64
                    / group.len().max(1) as f64,
                mean_iters: group.iter().map(|r| r.iters as f64).sum::<f64>()
                    / group.len().max(1) as f64,
            }
        })
        .collect()
}

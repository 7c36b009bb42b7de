//! Text file formats and run configuration.
//!
//! * observations: one header line `m n`, then one `i j value` line per
//!   observed entry (0-based, whitespace-separated); `#` starts a comment
//! * dense matrices: CSV, one row per matrix row, no header
//! * corruption: triplet CSV `i,j,value`, nonzeros only
//! * run report: JSON (report fields plus a config echo)
//! * config file: flat `key = value` lines
//!
//! Values are printed with 17 significant digits, which round-trips f64
//! exactly; the phase-diagram CSV uses 9 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::core::{ObservedMatrix, SolverConfig};
use crate::datagen::TrialRecord;
use crate::driver::SolveReport;
use crate::error::{Error, Result};

/// 17 significant digits: exact f64 round-trip.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// 9 significant digits, for benchmark tables.
pub fn fmt_short(x: f64) -> String {
    format!("{x:.8e}")
}

/// Parses an observation file into `(m, n, entries)`.
pub fn read_observations(path: &Path) -> Result<(usize, usize, Vec<(usize, usize, f64)>)> {
    let text = std::fs::read_to_string(path)?;
    parse_observations(&text)
}

pub fn parse_observations(text: &str) -> Result<(usize, usize, Vec<(usize, usize, f64)>)> {
    let mut shape: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match shape {
            None => {
                if fields.len() != 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("expected header 'm n', got '{line}'"),
                    });
                }
                let m = fields[0].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad row count: {e}"),
                })?;
                let n = fields[1].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad column count: {e}"),
                })?;
                shape = Some((m, n));
            }
            Some(_) => {
                if fields.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("expected 'i j value', got '{line}'"),
                    });
                }
                let i = fields[0].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad row index: {e}"),
                })?;
                let j = fields[1].parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad column index: {e}"),
                })?;
                let v = fields[2].parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad value: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "non-finite value".into(),
                    });
                }
                entries.push((i, j, v));
            }
        }
    }
    let (m, n) = shape.ok_or(Error::Parse {
        line: 1,
        msg: "missing 'm n' header".into(),
    })?;
    Ok((m, n, entries))
}

pub fn write_observations(path: &Path, obs: &ObservedMatrix) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", obs.n_rows(), obs.n_cols());
    for (k, &(i, j)) in obs.support().iter().enumerate() {
        let _ = writeln!(out, "{i} {j} {}", fmt_full(obs.observed_values()[k]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_dense_csv(path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..mat.nrows() {
        let row: Vec<String> = (0..mat.ncols()).map(|j| fmt_full(mat[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dense_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            row.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("bad value: {e}"),
            })?);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "ragged row".into(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty matrix file".into(),
        });
    }
    let (m, n) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

/// Writes `(i, j, value)` triplets as CSV.
pub fn write_triplets_csv<I>(path: &Path, triplets: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, usize, f64)>,
{
    let mut out = String::new();
    for (i, j, v) in triplets {
        let _ = writeln!(out, "{i},{j},{}", fmt_full(v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_triplets_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 'i,j,value', got '{line}'"),
            });
        }
        let parse_idx = |s: &str| -> Result<usize> {
            s.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("bad index: {e}"),
            })
        };
        let v = fields[2].trim().parse::<f64>().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("bad value: {e}"),
        })?;
        out.push((parse_idx(fields[0])?, parse_idx(fields[1])?, v));
    }
    Ok(out)
}

/// Header of the phase-diagram CSV.
pub const PHASE_CSV_HEADER: &str =
    "missing_frac,corrupt_frac,sigma,trial,rmse,rmse_visible,oracle,success,iters,safeguards,seconds";

/// Renders benchmark rows. With `tag_solver` a trailing `solver` column is
/// appended (used when several solvers share one run).
pub fn phase_csv(records: &[TrialRecord], tag_solver: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}{}",
        PHASE_CSV_HEADER,
        if tag_solver { ",solver" } else { "" }
    );
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_short(r.missing_frac),
            fmt_short(r.corrupt_frac),
            fmt_short(r.sigma),
            r.trial,
            fmt_short(r.rmse),
            fmt_short(r.rmse_visible),
            fmt_short(r.oracle),
            u8::from(r.success),
            r.iters,
            r.safeguards,
            fmt_short(r.seconds),
        );
        if tag_solver {
            let _ = write!(out, ",{}", r.solver.name());
        }
        out.push('\n');
    }
    out
}

/// JSON report: solve summary plus the configuration that produced it.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub report: &'a SolveReport,
    pub config: &'a SolverConfig,
}

pub fn write_report_json(path: &Path, report: &SolveReport, config: &SolverConfig) -> Result<()> {
    let wrapper = RunReport { report, config };
    let text = serde_json::to_string_pretty(&wrapper)
        .map_err(|e| Error::Parameter(format!("report serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Flat `key = value` config file; `#` starts a comment. Keys are
/// returned in file order for deterministic precedence handling.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_precision_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-12..12));
            let back: f64 = fmt_full(x).parse().unwrap();
            assert_eq!(x.to_bits(), back.to_bits());
        }
    }

    #[test]
    fn observation_file_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("parsumi_io_test_obs");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("obs.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut entries = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                if rng.random_bool(0.7) {
                    entries.push((i, j, rng.random_range(-3.0..3.0)));
                }
            }
        }
        let obs = ObservedMatrix::new(5, 4, &entries, 1e-10).unwrap();
        write_observations(&path, &obs).unwrap();
        let (m, n, read) = read_observations(&path).unwrap();
        let obs2 = ObservedMatrix::new(m, n, &read, 1e-10).unwrap();
        assert_eq!(obs.support(), obs2.support());
        for (a, b) in obs
            .observed_values()
            .iter()
            .zip(obs2.observed_values().iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn observation_parse_errors_carry_line_numbers() {
        let bad = "5 4\n0 0 1.0\n1 oops 2.0\n";
        match parse_observations(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_observations("").is_err());
        assert!(parse_observations("# only comments\n").is_err());
    }

    #[test]
    fn dense_csv_round_trip() {
        let dir = std::env::temp_dir().join("parsumi_io_test_dense");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mat = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-2.0..2.0));
        write_dense_csv(&path, &mat).unwrap();
        let back = read_dense_csv(&path).unwrap();
        assert_eq!(mat, back);
    }

    #[test]
    fn triplet_round_trip() {
        let dir = std::env::temp_dir().join("parsumi_io_test_trip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("e.csv");
        let trips = vec![(0usize, 1usize, 0.5), (3, 2, -1.25)];
        write_triplets_csv(&path, trips.iter().copied()).unwrap();
        assert_eq!(read_triplets_csv(&path).unwrap(), trips);
    }

    #[test]
    fn config_file_parsing() {
        let dir = std::env::temp_dir().join("parsumi_io_test_cfg");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        std::fs::write(&path, "# run settings\nrank = 3\ntol=1e-8\n\nn0 = 12\n").unwrap();
        let map = read_config_file(&path).unwrap();
        assert_eq!(map.get("rank").unwrap(), "3");
        assert_eq!(map.get("tol").unwrap(), "1e-8");
        assert_eq!(map.get("n0").unwrap(), "12");
        std::fs::write(&path, "rank 3\n").unwrap();
        assert!(read_config_file(&path).is_err());
    }

    #[test]
    fn phase_csv_schema() {
        use crate::datagen::{SolverKind, TrialRecord};
        let rec = TrialRecord {
            missing_frac: 0.2,
            corrupt_frac: 0.05,
            sigma: 0.01,
            trial: 3,
            rmse: 0.012345,
            rmse_visible: 0.01,
            oracle: 0.007,
            success: true,
            iters: 17,
            safeguards: 1,
            seconds: 0.25,
            solver: SolverKind::Parsumi,
        };
        let csv = phase_csv(&[rec.clone()], false);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), PHASE_CSV_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 11);
        assert!(row.contains(",1,17,1,"));
        let tagged = phase_csv(&[rec], true);
        assert!(tagged.lines().next().unwrap().ends_with(",solver"));
        assert!(tagged.lines().nth(1).unwrap().ends_with(",parsumi"));
    }

    #[test]
    fn embed_uses_canonical_order_after_reload() {
        // serialize, reload, and check P_Ω output is bit-for-bit identical
        let dir = std::env::temp_dir().join("parsumi_io_test_canon");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("obs.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                if rng.random_bool(0.5) {
                    entries.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        let obs = ObservedMatrix::new(6, 5, &entries, 1e-10).unwrap();
        write_observations(&path, &obs).unwrap();
        let (m, n, read) = read_observations(&path).unwrap();
        let obs2 = ObservedMatrix::new(m, n, &read, 1e-10).unwrap();
        let mat = DMatrix::from_fn(6, 5, |i, j| (i * 5 + j) as f64);
        let v1 = obs.project(&mat).unwrap();
        let v2 = obs2.project(&mat).unwrap();
        let bits1: Vec<u64> = v1.iter().map(|x| x.to_bits()).collect();
        let bits2: Vec<u64> = v2.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits1, bits2);
        let _ = DVector::from_vec(vec![0.0]);
    }
}

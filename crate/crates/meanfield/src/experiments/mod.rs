//! Reproducible batch experiments.
//!
//! Each `run_*` driver turns one theoretical claim about the particle
//! system / limit flow into a measured, replicated statistic with seeds,
//! standard errors, and a pass/fail/inconclusive verdict. Results carry the
//! raw data table (emitted as CSV), per-cell summaries, fitted slopes, and
//! provenance (config hash, seed, crate version), and can be re-analyzed
//! offline: every data-driven verdict is a pure function of the emitted
//! rows plus the configuration.
//!
//! Statistical policy, shared by all drivers:
//! - a theorem violation is declared only with at least a 3-standard-error
//!   separation; anything weaker is `Inconclusive`;
//! - every reference-based distance is reported next to an oracle noise
//!   floor measured per run (self-distance of two independent reference
//!   constructions); when the floor reaches 30% of the signal the verdict
//!   degrades to `Inconclusive` rather than pass/fail;
//! - replications and grid cells run in parallel but are reduced in a
//!   fixed order with per-cell derived seeds, so outputs are identical
//!   across thread counts.

mod common;

pub mod chaos;
pub mod cltbound;
pub mod concentration;
pub mod contraction;
pub mod coupling;
pub mod moments;
pub mod rates;

pub use chaos::run_chaos;
pub use cltbound::check_kernel_clt_bound;
pub use concentration::run_concentration;
pub use contraction::run_contraction;
pub use coupling::run_coupling_check;
pub use moments::run_moment_monitor;
pub use rates::run_convergence_rate;

use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::limit::LimitMethod;
use crate::stats::SlopeFit;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Outcome of one named check. `Inconclusive` is first-class: it means the
/// data cannot distinguish pass from fail at the required significance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    /// Combine, keeping the worst outcome (`Fail` > `Inconclusive` > `Pass`).
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// A named check with a human-readable justification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedVerdict {
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
}

/// Per-cell replication summary. Every mean carries its standard error and
/// the replication count it was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    /// Textual cell key, e.g. `"n=128,step=200"`.
    pub cell: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// A named straight-line fit (log-log or raw, per the experiment's schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedSlope {
    pub name: String,
    #[serde(flatten)]
    pub fit: SlopeFit,
}

/// Common experiment configuration: the model, the particle-count grid, run
/// length, replication budget, master seed, the moment order `1 + tau` used
/// by rate/stability constants, and the reference-flow method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: ModelParams,
    /// Particle counts `N` (the field subsample size `M` follows as `M = N`).
    pub grid: Vec<usize>,
    pub n_steps: usize,
    pub replications: usize,
    pub seed: u64,
    /// Moment order parameter: statistics and rate exponents use `1 + tau`.
    pub tau: f64,
    /// How the deterministic reference flow is realized.
    pub method: LimitMethod,
    /// Output directory for `write_outputs`; `None` keeps results in memory.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.grid.is_empty() {
            return Err(Error::invalid("grid must be nonempty"));
        }
        if self.grid[0] == 0 {
            return Err(Error::invalid("grid values must be at least 1"));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if self.replications < 8 {
            return Err(Error::invalid(
                "replications must be at least 8 for error-bar statistics",
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid("tau must be finite and positive"));
        }
        Ok(())
    }
}

/// Everything a finished experiment produced. The `columns`/`rows` pair is
/// the raw data table (also what the CSV contains); floats are printed with
/// 17 significant digits so re-parsing the CSV reproduces them bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub stats: Vec<CellSummary>,
    pub slopes: Vec<NamedSlope>,
    pub verdicts: Vec<NamedVerdict>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl ExperimentResult {
    pub(crate) fn new(
        experiment: &str,
        cfg: &ExperimentConfig,
        columns: Vec<String>,
        rows: Vec<Vec<String>>,
    ) -> Result<Self> {
        Ok(Self {
            experiment: experiment.to_string(),
            columns,
            rows,
            stats: Vec::new(),
            slopes: Vec::new(),
            verdicts: Vec::new(),
            config_hash: config_hash(cfg)?,
            seed: cfg.seed,
            version: format!("meanfield {}", env!("CARGO_PKG_VERSION")),
        })
    }

    /// Worst verdict across all named checks.
    pub fn overall(&self) -> Verdict {
        self.verdicts
            .iter()
            .fold(Verdict::Pass, |acc, v| acc.and(v.verdict))
    }

    /// The raw table as CSV text (header + rows).
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            if row.len() != self.columns.len() {
                return Err(Error::invalid(format!(
                    "row width {} does not match {} columns",
                    row.len(),
                    self.columns.len()
                )));
            }
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    /// The JSON manifest: configuration, provenance, verdicts, summaries.
    pub fn manifest_json(&self, cfg: &ExperimentConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            experiment: &'a str,
            config: &'a ExperimentConfig,
            config_hash: &'a str,
            seed: u64,
            verdicts: &'a [NamedVerdict],
            overall: Verdict,
            versions: Versions<'a>,
            stats: &'a [CellSummary],
            slopes: &'a [NamedSlope],
            csv: String,
        }
        #[derive(Serialize)]
        struct Versions<'a> {
            crate_version: &'a str,
            schema: u32,
        }
        let m = Manifest {
            experiment: &self.experiment,
            config: cfg,
            config_hash: &self.config_hash,
            seed: self.seed,
            verdicts: &self.verdicts,
            overall: self.overall(),
            versions: Versions {
                crate_version: env!("CARGO_PKG_VERSION"),
                schema: 1,
            },
            stats: &self.stats,
            slopes: &self.slopes,
            csv: format!("{}.csv", self.experiment),
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }

    /// Write `<experiment>.csv` and `<experiment>.manifest.json` into `dir`
    /// atomically (write to a temp file in the same directory, then rename;
    /// no partial files survive a failure). Returns the two paths.
    pub fn write_outputs(
        &self,
        cfg: &ExperimentConfig,
        dir: &Path,
    ) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.experiment));
        let man_path = dir.join(format!("{}.manifest.json", self.experiment));
        atomic_write(&csv_path, self.to_csv_string()?.as_bytes())?;
        atomic_write(&man_path, self.manifest_json(cfg)?.as_bytes())?;
        Ok((csv_path, man_path))
    }

    /// Parse the raw table back into numbers (the exactness of `.17e`
    /// formatting makes this lossless). Used by offline verdict recomputes.
    pub fn numeric_rows(&self) -> Result<Vec<Vec<f64>>> {
        parse_numeric_rows(&self.rows)
    }
}

/// Parse string rows to `f64` rows.
pub fn parse_numeric_rows(rows: &[Vec<String>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad numeric cell {s:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

/// Write `bytes` to `path` atomically via a same-directory temp file: on
/// any failure the destination is untouched and no partial file survives.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::invalid(format!("no parent directory for {}", path.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Deterministic 64-bit FNV-1a content hash of the canonical config JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in canonical.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("fnv1a64:{h:016x}"))
}

/// Canonical float formatting for CSV cells: round-trips exactly.
pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:.17e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AMatrix, DriftSpec, NoiseSpec};
    use crate::kernels::KernelSpec;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            params: ModelParams {
                dim: 1,
                a: AMatrix::scalar(0.3),
                delta: 0.05,
                alpha: 0.3,
                drift: DriftSpec::LinearMeanField {
                    a1: 0.5,
                    a2: 0.5,
                    a3: 0.5,
                },
                noise: NoiseSpec {
                    b: 0.15,
                    c_scale: 0.2,
                    l_scale: 1.0,
                },
                p: KernelSpec::gaussian(0.8, 1).unwrap(),
                pprime: KernelSpec::gaussian(0.5, 1).unwrap(),
            },
            grid: vec![16, 32, 64],
            n_steps: 12,
            replications: 8,
            seed: 7,
            tau: 1.0,
            method: LimitMethod::QuantileGrid { grid: 256 },
            out_dir: None,
        }
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let mut cfg = small_config();
        cfg.grid = vec![16, 16];
        assert!(cfg.validate().is_err());
        cfg.grid = vec![32, 16];
        assert!(cfg.validate().is_err());
        cfg.grid = vec![];
        assert!(cfg.validate().is_err());
        cfg.grid = vec![16, 32];
        cfg.replications = 4;
        assert!(cfg.validate().is_err());
        cfg.replications = 8;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn verdict_combination_keeps_worst() {
        use Verdict::*;
        assert_eq!(Pass.and(Pass), Pass);
        assert_eq!(Pass.and(Inconclusive), Inconclusive);
        assert_eq!(Inconclusive.and(Fail), Fail);
        assert_eq!(Fail.and(Pass), Fail);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = small_config();
        let h1 = config_hash(&cfg).unwrap();
        let h2 = config_hash(&cfg).unwrap();
        assert_eq!(h1, h2);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        assert_ne!(h1, config_hash(&cfg2).unwrap());
        assert!(h1.starts_with("fnv1a64:"));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let cfg = small_config();
        let mut res = ExperimentResult::new(
            "demo",
            &cfg,
            vec!["a".into(), "b".into()],
            vec![
                vec![fmt_f(std::f64::consts::PI), fmt_f(1.0 / 3.0)],
                vec![fmt_f(6.02214076e23), fmt_f(-0.0)],
            ],
        )
        .unwrap();
        res.verdicts.push(NamedVerdict {
            name: "demo".into(),
            verdict: Verdict::Pass,
            detail: "".into(),
        });
        let csv = res.to_csv_string().unwrap();
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let rows: Vec<Vec<String>> = rdr
            .records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect();
        let nums = parse_numeric_rows(&rows).unwrap();
        assert_eq!(nums[0][0], std::f64::consts::PI);
        assert_eq!(nums[0][1], 1.0 / 3.0);
        assert_eq!(nums[1][0], 6.02214076e23);
        assert_eq!(nums[1][1], 0.0);
    }

    #[test]
    fn outputs_are_written_atomically_and_parse() {
        let cfg = small_config();
        let res = ExperimentResult::new(
            "demo",
            &cfg,
            vec!["x".into()],
            vec![vec![fmt_f(1.5)]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, man_path) = res.write_outputs(&cfg, dir.path()).unwrap();
        assert!(csv_path.exists() && man_path.exists());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&man_path).unwrap()).unwrap();
        assert_eq!(manifest["experiment"], "demo");
        assert_eq!(manifest["overall"], "pass");
        assert_eq!(manifest["versions"]["schema"], 1);
        assert_eq!(manifest["config"]["seed"], 7);
        // No stray temp files left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name();
                let name = name.to_string_lossy().into_owned();
                name != "demo.csv" && name != "demo.manifest.json"
            })
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }
}

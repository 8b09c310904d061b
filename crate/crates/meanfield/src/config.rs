//! JSON run configuration for the command-line front end.
//!
//! [`RunConfig`] is the single on-disk format: a model section plus
//! experiment controls, every field optional (documented defaults) and
//! unknown keys rejected. Validation is collected — a bad config reports
//! every violated constraint at once, not just the first — and is stricter
//! than the library's own checks: the CLI surface pins the interacting
//! regime (`delta > 0`, `alpha` strictly inside `(0, 1)`, bandwidths
//! positive), while library callers may explore boundary cases such as
//! `delta = 0` directly.

use crate::dynamics::{AMatrix, DriftSpec, ModelParams, NoiseSpec};
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::limit::LimitMethod;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A smoothing kernel as raw config values (validated later, so a bad
/// bandwidth is collected with the other violations instead of aborting
/// the parse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Gaussian,
            bandwidth: 0.8,
        }
    }
}

impl KernelConfig {
    fn check(&self, name: &str, dim: usize, errs: &mut Vec<String>) {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            errs.push(format!(
                "{name}.bandwidth must satisfy lambda > 0, got {}",
                self.bandwidth
            ));
        } else if self.family == KernelFamily::BiExponential && dim != 1 {
            errs.push(format!("{name}: bi-exponential kernels support only dim = 1"));
        }
    }

    fn build(&self, dim: usize) -> Result<KernelSpec> {
        KernelSpec::new(self.family, self.bandwidth, dim)
    }
}

/// Model section: the particle/field dynamics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub a: AMatrix,
    pub delta: f64,
    pub alpha: f64,
    pub drift: DriftSpec,
    pub noise: NoiseSpec,
    /// Field diffusion kernel.
    pub p: KernelConfig,
    /// Particle deposit kernel.
    pub pprime: KernelConfig,
}

impl Default for ModelConfig {
    /// The documented baseline: a contractive 1-D Gaussian instance with
    /// every stability flag satisfied.
    fn default() -> Self {
        ModelConfig {
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
            p: KernelConfig {
                family: KernelFamily::Gaussian,
                bandwidth: 0.8,
            },
            pprime: KernelConfig {
                family: KernelFamily::Gaussian,
                bandwidth: 0.5,
            },
        }
    }
}

/// The complete run configuration: model + experiment controls + output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Particle counts `N`; the field subsample is always `M = N`.
    pub grid: Vec<usize>,
    pub n_steps: usize,
    pub replications: usize,
    pub seed: u64,
    pub tau: f64,
    pub method: LimitMethod,
    /// Output directory; `None` means the dispatcher's `--out` (or `.`).
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            grid: vec![64, 128, 256, 512, 1024],
            n_steps: 40,
            replications: 32,
            seed: 7_430_941,
            tau: 1.0,
            method: LimitMethod::QuantileGrid { grid: 1024 },
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Validate every constraint, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let m = &self.model;
        if m.dim == 0 {
            errs.push("model.dim must satisfy dim >= 1".into());
        }
        if let Err(e) = m.a.validate(m.dim.max(1)) {
            errs.push(format!("model.a: {e}"));
        }
        if !(m.delta.is_finite() && m.delta > 0.0) {
            errs.push(format!("model.delta must satisfy delta > 0, got {}", m.delta));
        }
        if !(m.alpha.is_finite() && 0.0 < m.alpha && m.alpha < 1.0) {
            errs.push(format!(
                "model.alpha must lie in the open interval (0, 1), got {}",
                m.alpha
            ));
        }
        if let Err(e) = m.drift.validate() {
            errs.push(format!("model.drift: {e}"));
        }
        if let Err(e) = m.noise.validate() {
            errs.push(format!("model.noise: {e}"));
        }
        m.p.check("model.p", m.dim, &mut errs);
        m.pprime.check("model.pprime", m.dim, &mut errs);

        if self.grid.is_empty() {
            errs.push("grid must be nonempty".into());
        }
        if self.grid.first().is_some_and(|&n| n == 0) {
            errs.push("grid values must satisfy N >= 1".into());
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            errs.push("grid must be strictly increasing".into());
        }
        if self.n_steps == 0 {
            errs.push("n_steps must be at least 1".into());
        }
        if self.replications < 8 {
            errs.push("replications must be at least 8 for error-bar statistics".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            errs.push(format!("tau must be finite and positive, got {}", self.tau));
        }
        match self.method {
            LimitMethod::QuantileGrid { grid } => {
                if grid < 2 {
                    errs.push("method.quantile_grid.grid must be at least 2".into());
                }
                if m.dim > 1 {
                    errs.push("method.quantile_grid requires dim = 1".into());
                }
            }
            LimitMethod::Ensemble { n_ref } => {
                if n_ref == 0 {
                    errs.push("method.ensemble.n_ref must satisfy N >= 1".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Additional constraints specific to one experiment subcommand.
    pub fn validate_for(&self, experiment: &str) -> Result<()> {
        self.validate()?;
        let mut errs = Vec::new();
        match experiment {
            "rates" | "cltbound" => {
                if self.grid.len() < 3 {
                    errs.push(format!(
                        "{experiment}: grid needs at least 3 values (a slope fit needs 3 points), got {}",
                        self.grid.len()
                    ));
                }
            }
            "chaos" => {
                if self.grid.len() < 2 {
                    errs.push("chaos: grid needs at least 2 values to test a trend".into());
                }
            }
            "couple" => {
                if self.model.dim != 1 {
                    errs.push("couple: exact transport audit requires dim = 1".into());
                }
                if !matches!(self.method, LimitMethod::QuantileGrid { .. }) {
                    errs.push("couple: requires the quantile_grid reference method".into());
                }
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Build the typed model parameters (assumes `validate` passed).
    pub fn to_model_params(&self) -> Result<ModelParams> {
        let m = &self.model;
        let params = ModelParams {
            dim: m.dim,
            a: m.a.clone(),
            delta: m.delta,
            alpha: m.alpha,
            drift: m.drift.clone(),
            noise: m.noise.clone(),
            p: m.p.build(m.dim)?,
            pprime: m.pprime.build(m.dim)?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Build the experiment-driver configuration (assumes `validate` passed).
    pub fn to_experiment_config(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            params: self.to_model_params()?,
            grid: self.grid.clone(),
            n_steps: self.n_steps,
            replications: self.replications,
            seed: self.seed,
            tau: self.tau,
            method: self.method,
            out_dir: self.out_dir.clone(),
        })
    }

    /// The canonical serialized form: parsing it back yields a structurally
    /// equal configuration.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse from a JSON string and validate (all violations reported).
    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Tuned defaults per experiment: cell grids and budgets sized so each
    /// subcommand finishes in minutes on a single core while leaving the
    /// fitted quantities resolvable. `simulate`/`stability` accept any
    /// experiment's defaults (only the model section matters to them).
    pub fn recommended(experiment: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        match experiment {
            "rates" => {} // the base default is the rates configuration
            "contract" => {
                cfg.grid = vec![64];
                cfg.n_steps = 40;
                cfg.method = LimitMethod::QuantileGrid { grid: 512 };
            }
            "chaos" => {
                cfg.grid = vec![8, 32, 128, 512];
                cfg.n_steps = 60;
                cfg.replications = 24;
            }
            "concentrate" => {
                cfg.grid = vec![16, 32, 64, 128];
                cfg.n_steps = 30;
                cfg.replications = 500;
                cfg.method = LimitMethod::QuantileGrid { grid: 512 };
            }
            "couple" => {
                cfg.grid = vec![64];
                cfg.n_steps = 50;
                cfg.replications = 200;
                cfg.method = LimitMethod::QuantileGrid { grid: 2048 };
            }
            "moments" => {
                cfg.grid = vec![64, 256];
                cfg.n_steps = 100;
                cfg.replications = 16;
            }
            "cltbound" => {
                cfg.grid = vec![100, 1000, 10_000];
                cfg.n_steps = 1;
            }
            _ => {}
        }
        cfg
    }
}

/// Read and validate a configuration file. Syntax errors carry the JSON
/// line/column context; constraint violations list every failure.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.dim, 1);
        assert_eq!(cfg.grid, vec![64, 128, 256, 512, 1024]);
        assert_eq!(cfg.replications, 32);
        // The default model satisfies the library-level checks too.
        cfg.to_experiment_config().unwrap().validate().unwrap();
    }

    #[test]
    fn violations_are_collected_not_first_only() {
        let bad = r#"{
            "model": {"alpha": 1.5, "delta": -0.1, "p": {"bandwidth": 0.0}},
            "grid": [64, 32],
            "replications": 2,
            "tau": 0.0
        }"#;
        let err = RunConfig::from_json_str(bad).unwrap_err();
        match err {
            Error::Config(list) => {
                let all = list.join("\n");
                assert!(all.contains("alpha"), "{all}");
                assert!(all.contains("(0, 1)"), "{all}");
                assert!(all.contains("delta"), "{all}");
                assert!(all.contains("lambda > 0"), "{all}");
                assert!(all.contains("strictly increasing"), "{all}");
                assert!(all.contains("replications"), "{all}");
                assert!(all.contains("tau"), "{all}");
                assert!(list.len() >= 6, "{all}");
            }
            other => panic!("expected a collected violation list, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json_str(r#"{"gridd": [1]}"#).unwrap_err();
        assert!(matches!(err, Error::Json(_)), "{err:?}");
        let err = RunConfig::from_json_str(r#"{"model": {"dims": 2}}"#).unwrap_err();
        assert!(matches!(err, Error::Json(_)), "{err:?}");
    }

    #[test]
    fn syntax_errors_carry_line_context() {
        let err = RunConfig::from_json_str("{\n  \"grid\": [64,\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn canonical_round_trip_is_structural_identity() {
        let mut cfg = RunConfig::recommended("couple");
        cfg.model.drift = DriftSpec::InteractionKernel {
            a1: 0.25,
            a2: 0.0,
            a3: -0.5,
            kappa: 0.1,
        };
        cfg.model.pprime.family = KernelFamily::BiExponential;
        cfg.out_dir = Some("results".into());
        let text = cfg.canonical_json().unwrap();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(cfg, back);
        // And the canonical form is stable under a second emit.
        assert_eq!(text, back.canonical_json().unwrap());
    }

    #[test]
    fn per_experiment_constraints() {
        let mut cfg = RunConfig::default();
        cfg.grid = vec![64];
        assert!(cfg.validate_for("rates").is_err());
        assert!(cfg.validate_for("moments").is_ok());
        let couple = RunConfig::recommended("couple");
        assert!(couple.validate_for("couple").is_ok());
        let mut couple2 = couple.clone();
        couple2.method = LimitMethod::Ensemble { n_ref: 64 };
        assert!(couple2.validate_for("couple").is_err());
        let mut chaos = RunConfig::recommended("chaos");
        chaos.grid = vec![512];
        assert!(chaos.validate_for("chaos").is_err());
    }

    #[test]
    fn recommended_configs_all_validate() {
        for exp in [
            "rates",
            "contract",
            "chaos",
            "concentrate",
            "couple",
            "moments",
            "cltbound",
            "simulate",
            "stability",
        ] {
            let cfg = RunConfig::recommended(exp);
            cfg.validate().unwrap_or_else(|e| panic!("{exp}: {e}"));
            if matches!(
                exp,
                "rates" | "contract" | "chaos" | "concentrate" | "couple" | "moments" | "cltbound"
            ) {
                cfg.validate_for(exp).unwrap_or_else(|e| panic!("{exp}: {e}"));
            }
        }
    }

    #[test]
    fn config_file_parsing_reports_io_and_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        assert!(parse_config(&path).is_err()); // missing file
        std::fs::write(&path, RunConfig::default().canonical_json().unwrap()).unwrap();
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}

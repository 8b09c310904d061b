//! Concentration experiment: empirical exceedance frequencies of the
//! distance `W1(mu^N_n, mu_n)` over a large replication budget, on an
//! `(N, epsilon)` grid at several steps. The testable signature of
//! exponential concentration is that, at fixed `epsilon`, the
//! log-frequency falls at least linearly in `N`.
//!
//! The underlying tail bounds carry existential constants, so only this
//! qualitative decay shape is checked; every verdict repeats that caveat.

use super::common::{
    checkpoint_steps, measure_distance, run_ips2, sampled_measure, ReferencePair,
};
use super::{fmt_f, CellSummary, ExperimentConfig, ExperimentResult, NamedSlope, NamedVerdict, Verdict};
use crate::dynamics::empirical_measure;
use crate::error::Result;
use crate::rng::mix;
use crate::stats::ols_slope;
use rayon::prelude::*;

/// Exceedance frequencies need a large sample; the driver never runs with
/// fewer replications than this.
pub const MIN_REPLICATIONS: usize = 500;

/// One-sided z threshold (p < 0.01) for "significantly negative slope".
const Z_NEG: f64 = -2.326;

/// Number of epsilon levels spanned between the sampling-noise scales of
/// the largest and smallest `N`.
const N_EPS: usize = 4;

const CAVEAT: &str =
    "tail-bound constants are existential; only the qualitative decay shape is tested";

#[derive(Debug, Clone, Copy)]
pub struct ConcentrationRow {
    pub n_value: usize,
    pub rep: usize,
    pub step: usize,
    pub w1_mu: f64,
}

pub const CONCENTRATION_COLUMNS: [&str; 4] = ["n_value", "rep", "step", "w1_mu"];

/// Raw distances over the `(N, replication)` grid at checkpoint steps.
/// Exceedance curves for any `epsilon` are recomputable from the rows; the
/// driver also evaluates them on a deterministic `epsilon` grid.
pub fn run_concentration(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let params = &cfg.params;
    let reps = cfg.replications.max(MIN_REPLICATIONS);
    let refs = ReferencePair::build(params, cfg.n_steps, cfg.method, cfg.seed)?;
    let checkpoints = checkpoint_steps(cfg.n_steps, 3);

    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|ci| (0..reps).map(move |r| (ci, r)))
        .collect();
    let per_job: Vec<Result<Vec<(usize, f64)>>> = jobs
        .par_iter()
        .map(|&(ci, rep)| {
            let n = cfg.grid[ci];
            let seed = mix(mix(cfg.seed, 0x434f4e43), ((ci as u64) << 32) | rep as u64);
            let mut out = Vec::with_capacity(checkpoints.len());
            run_ips2(params, n, n, cfg.n_steps, seed, |step, ens, _| {
                if checkpoints.binary_search(&step).is_ok() {
                    let d = measure_distance(
                        &empirical_measure(ens),
                        refs.primary.mu(step),
                        mix(seed, step as u64),
                    )?;
                    out.push((step, d));
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect();

    let mut rows = Vec::new();
    for (job_idx, res) in per_job.into_iter().enumerate() {
        let (ci, rep) = jobs[job_idx];
        for (step, d) in res? {
            rows.push(vec![
                cfg.grid[ci].to_string(),
                rep.to_string(),
                step.to_string(),
                fmt_f(d),
            ]);
        }
    }

    let mut result = ExperimentResult::new(
        "concentrate",
        cfg,
        CONCENTRATION_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    )?;
    let parsed = parse_concentration_rows(&result.rows)?;
    let eps = epsilon_grid(cfg, &refs)?;
    let (stats, slopes, verdicts) = analyze_concentration(&parsed, cfg, &eps)?;
    result.stats = stats;
    result.slopes = slopes;
    result.verdicts = verdicts;
    Ok(result)
}

/// Deterministic epsilon levels: geometric between the i.i.d. sampling
/// noise scale at the largest `N` (lower end) and 1.5x the scale at the
/// smallest `N` (upper end), measured against the final reference law.
pub(crate) fn epsilon_grid(cfg: &ExperimentConfig, refs: &ReferencePair) -> Result<Vec<f64>> {
    let mu_final = refs.primary.mu(cfg.n_steps);
    let scale_at = |n: usize, salt: u64| -> Result<f64> {
        let mut acc = 0.0;
        const DRAWS: usize = 8;
        for r in 0..DRAWS {
            let s = mix(mix(cfg.seed, 0x45505347 ^ salt), r as u64);
            let draw = sampled_measure(mu_final, n, s)?;
            acc += measure_distance(&draw, mu_final, mix(s, 1))?;
        }
        Ok(acc / DRAWS as f64)
    };
    let n_lo = *cfg.grid.first().expect("validated nonempty");
    let n_hi = *cfg.grid.last().expect("validated nonempty");
    let lo = 0.8 * scale_at(n_hi, 1)?;
    let hi = (1.5 * scale_at(n_lo, 2)?).max(lo * 1.01);
    let ratio = (hi / lo).powf(1.0 / (N_EPS as f64 - 1.0));
    Ok((0..N_EPS).map(|k| lo * ratio.powi(k as i32)).collect())
}

pub fn parse_concentration_rows(rows: &[Vec<String>]) -> Result<Vec<ConcentrationRow>> {
    let nums = super::parse_numeric_rows(rows)?;
    nums.iter()
        .map(|r| {
            if r.len() != CONCENTRATION_COLUMNS.len() {
                return Err(crate::error::Error::invalid("bad concentrate row width"));
            }
            Ok(ConcentrationRow {
                n_value: r[0] as usize,
                rep: r[1] as usize,
                step: r[2] as usize,
                w1_mu: r[3],
            })
        })
        .collect()
}

/// Exceedance tables and the decay-shape verdict, all from raw rows.
pub fn analyze_concentration(
    rows: &[ConcentrationRow],
    cfg: &ExperimentConfig,
    eps: &[f64],
) -> Result<(Vec<CellSummary>, Vec<NamedSlope>, Vec<NamedVerdict>)> {
    let final_step = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let mut stats = Vec::new();
    let mut slopes = Vec::new();

    let mut any_exceed = false;
    let mut any_significant = false;
    let mut any_positive = false;
    let mut detail = String::new();

    let mut steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();

    for (ei, &e) in eps.iter().enumerate() {
        // Frequencies at every (N, step) cell, as summaries with binomial SE.
        for &s in &steps {
            for &n in &cfg.grid {
                let vals: Vec<&ConcentrationRow> = rows
                    .iter()
                    .filter(|r| r.n_value == n && r.step == s)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let r_tot = vals.len() as f64;
                let k = vals.iter().filter(|r| r.w1_mu > e).count() as f64;
                let p = k / r_tot;
                let se = (p * (1.0 - p) / r_tot).sqrt();
                if k > 0.0 {
                    any_exceed = true;
                }
                stats.push(CellSummary {
                    cell: format!("exceed,eps={e:.4e},n={n},step={s}"),
                    mean: p,
                    se,
                    n: vals.len(),
                });
            }
        }

        // Decay fit in N at the final step: ln(freq) vs N over informative
        // cells (at least one exceedance).
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in &cfg.grid {
            let vals: Vec<&ConcentrationRow> = rows
                .iter()
                .filter(|r| r.n_value == n && r.step == final_step)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let k = vals.iter().filter(|r| r.w1_mu > e).count();
            if k > 0 {
                xs.push(n as f64);
                ys.push((k as f64 / vals.len() as f64).ln());
            }
        }
        if xs.len() >= 3 {
            let fit = ols_slope(&xs, &ys)?;
            let z = if fit.slope_se > 0.0 {
                fit.slope / fit.slope_se
            } else if fit.slope < 0.0 {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            if fit.slope < 0.0 && z < Z_NEG {
                any_significant = true;
            }
            if fit.slope > 0.0 && z > -Z_NEG {
                any_positive = true;
            }
            detail.push_str(&format!(
                "eps[{ei}]={e:.3e}: ln-freq slope {:.3e}/N (z={z:.2}) on {} cells; ",
                fit.slope,
                xs.len()
            ));
            slopes.push(NamedSlope {
                name: format!("ln_freq_vs_n_eps{ei}"),
                fit,
            });
        } else {
            detail.push_str(&format!(
                "eps[{ei}]={e:.3e}: only {} informative cells; ",
                xs.len()
            ));
        }
    }

    let verdicts = vec![if !any_exceed {
        NamedVerdict {
            name: "exceedance_decay".into(),
            verdict: Verdict::Inconclusive,
            detail: format!(
                "zero exceedances in every cell — widen the epsilon grid downward; {CAVEAT}"
            ),
        }
    } else if any_positive {
        NamedVerdict {
            name: "exceedance_decay".into(),
            verdict: Verdict::Fail,
            detail: format!("significantly increasing tail frequency: {detail}{CAVEAT}"),
        }
    } else if any_significant {
        NamedVerdict {
            name: "exceedance_decay".into(),
            verdict: Verdict::Pass,
            detail: format!("{detail}{CAVEAT}"),
        }
    } else {
        NamedVerdict {
            name: "exceedance_decay".into(),
            verdict: Verdict::Inconclusive,
            detail: format!(
                "no epsilon level with enough informative cells for a significant fit: {detail}{CAVEAT}"
            ),
        }
    }];
    Ok((stats, slopes, verdicts))
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_config;
    use super::*;

    #[test]
    fn concentration_detects_tail_decay() {
        let mut cfg = small_config();
        cfg.grid = vec![8, 16, 32, 64];
        cfg.n_steps = 6;
        cfg.replications = 8; // raised to MIN_REPLICATIONS by the driver
        let res = run_concentration(&cfg).unwrap();
        // Replication floor applied: rows per (cell, checkpoint).
        let parsed = parse_concentration_rows(&res.rows).unwrap();
        let reps_seen = parsed
            .iter()
            .filter(|r| r.n_value == 8 && r.step == cfg.n_steps)
            .count();
        assert_eq!(reps_seen, MIN_REPLICATIONS);
        let v = &res.verdicts[0];
        assert_eq!(v.name, "exceedance_decay");
        assert_eq!(v.verdict, Verdict::Pass, "{}", v.detail);
        assert!(v.detail.contains("existential"));
        // At least one fitted slope, and every fitted slope decreasing.
        assert!(!res.slopes.is_empty());
        for s in &res.slopes {
            assert!(s.fit.slope < 0.0, "{}: {}", s.name, s.fit.slope);
        }
    }

    #[test]
    fn oversized_epsilon_gives_widen_advisory() {
        let cfg = small_config();
        let rows: Vec<ConcentrationRow> = (0..60)
            .map(|i| ConcentrationRow {
                n_value: cfg.grid[i % 3],
                rep: i / 3,
                step: 12,
                w1_mu: 0.01,
            })
            .collect();
        let (_, _, verdicts) = analyze_concentration(&rows, &cfg, &[5.0, 10.0]).unwrap();
        assert_eq!(verdicts[0].verdict, Verdict::Inconclusive);
        assert!(verdicts[0].detail.contains("widen"));
    }
}

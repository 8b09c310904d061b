//! Convergence-rate experiment: how fast the particle system approaches
//! the deterministic flow as `N` grows.
//!
//! For every `N` in the grid (field subsample `M = N`), replications of the
//! sampled-field particle system are compared against the reference flow at
//! checkpoint steps; the per-`N` statistic is the supremum over a step
//! window of the mean summed distance `W1(mu^N_n, mu_n) + W1(eta^N_n,
//! eta_n)`. A weighted log-log fit of that statistic against `N` is
//! compared to the theoretical exponent for the configured `(d, tau)`.

use super::common::{
    checkpoint_steps, field_distance, measure_distance, run_ips2, ReferencePair,
    FLOOR_SIGNAL_RATIO,
};
use super::{
    fmt_f, CellSummary, ExperimentConfig, ExperimentResult, NamedSlope, NamedVerdict, Verdict,
};
use crate::dynamics::empirical_measure;
use crate::error::Result;
use crate::rng::mix;
use crate::stability::{compute_constants, rate_exponent};
use crate::stats::{mean_se, ols_slope, wls_loglog};
use rayon::prelude::*;

/// Acceptable deviation of the fitted log-log slope from `-exponent`.
pub const RATE_SLOPE_TOL: f64 = 0.15;

/// Significance multiple for the flatness-in-`n` trend check.
const TREND_SIGMA: f64 = 3.0;

/// One parsed raw-table row.
#[derive(Debug, Clone, Copy)]
pub struct RatesRow {
    pub n_value: usize,
    pub step: usize,
    pub rep: usize,
    pub w1_mu: f64,
    pub w1_eta: f64,
    pub w1_sum: f64,
    pub floor: f64,
}

pub const RATES_COLUMNS: [&str; 7] =
    ["n_value", "step", "rep", "w1_mu", "w1_eta", "w1_sum", "floor"];

/// Estimate distances to the reference flow over the `(N, replication)`
/// grid and fit the decay rate. See the module docs for the design.
pub fn run_convergence_rate(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let params = &cfg.params;
    let refs = ReferencePair::build(params, cfg.n_steps, cfg.method, cfg.seed)?;
    let checkpoints = checkpoint_steps(cfg.n_steps, 10);
    let floors: Vec<f64> = checkpoints
        .iter()
        .map(|&n| refs.floor_at(n, mix(cfg.seed, 0x464c4f52)))
        .collect::<Result<_>>()?;

    // (cell, rep) jobs in a fixed order; rayon's indexed collect restores
    // that order regardless of worker count.
    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|ci| (0..cfg.replications).map(move |r| (ci, r)))
        .collect();
    let per_job: Vec<Result<Vec<(usize, f64, f64)>>> = jobs
        .par_iter()
        .map(|&(ci, rep)| {
            let n = cfg.grid[ci];
            let seed = mix(mix(cfg.seed, 0x52415445), ((ci as u64) << 32) | rep as u64);
            let mut out = Vec::with_capacity(checkpoints.len());
            run_ips2(params, n, n, cfg.n_steps, seed, |step, ens, field| {
                if let Ok(k) = checkpoints.binary_search(&step) {
                    let mu = empirical_measure(ens);
                    let dm = measure_distance(&mu, refs.primary.mu(step), mix(seed, step as u64))?;
                    let de = field_distance(
                        field,
                        refs.primary.eta(step),
                        mix(seed, (step as u64) << 1),
                    )?;
                    out.push((k, dm, de));
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (job_idx, res) in per_job.into_iter().enumerate() {
        let (ci, rep) = jobs[job_idx];
        for (k, dm, de) in res? {
            rows.push(vec![
                cfg.grid[ci].to_string(),
                checkpoints[k].to_string(),
                rep.to_string(),
                fmt_f(dm),
                fmt_f(de),
                fmt_f(dm + de),
                fmt_f(floors[k]),
            ]);
        }
    }

    let mut result = ExperimentResult::new(
        "rates",
        cfg,
        RATES_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    )?;
    let parsed = parse_rates_rows(&result.rows)?;
    let (stats, slopes, mut verdicts) = analyze_rates(&parsed, cfg)?;
    let stab = compute_constants(params, cfg.tau)?;
    let flags_ok = stab.cond_contraction && stab.cond_delta_a0;
    verdicts.insert(
        0,
        NamedVerdict {
            name: "stability_flags".into(),
            verdict: if flags_ok {
                Verdict::Pass
            } else {
                Verdict::Inconclusive
            },
            detail: format!(
                "contraction(c1+c2<1)={}, delta<a0={}; rate theory assumes both",
                stab.cond_contraction, stab.cond_delta_a0
            ),
        },
    );
    result.stats = stats;
    result.slopes = slopes;
    result.verdicts = verdicts;
    Ok(result)
}

/// Parse raw string rows into typed rows (offline re-analysis entry point).
pub fn parse_rates_rows(rows: &[Vec<String>]) -> Result<Vec<RatesRow>> {
    let nums = super::parse_numeric_rows(rows)?;
    nums.iter()
        .map(|r| {
            if r.len() != RATES_COLUMNS.len() {
                return Err(crate::error::Error::invalid("bad rates row width"));
            }
            Ok(RatesRow {
                n_value: r[0] as usize,
                step: r[1] as usize,
                rep: r[2] as usize,
                w1_mu: r[3],
                w1_eta: r[4],
                w1_sum: r[5],
                floor: r[6],
            })
        })
        .collect()
}

/// Pure analysis of the raw table: per-cell summaries, the log-log slope
/// fit, and the data-driven verdicts. Deterministic given (rows, config).
pub fn analyze_rates(
    rows: &[RatesRow],
    cfg: &ExperimentConfig,
) -> Result<(Vec<CellSummary>, Vec<NamedSlope>, Vec<NamedVerdict>)> {
    let d = cfg.params.dim;
    let mut stats = Vec::new();
    let mut verdicts = Vec::new();

    let mut steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let window_start = (cfg.n_steps / 10).max(1);

    // Per-(N, step) summaries and the per-N sup over the window.
    let mut sup_mean = Vec::new();
    let mut sup_se = Vec::new();
    let mut in_n_trend_ok = true;
    let mut trend_detail = String::new();
    for &n in &cfg.grid {
        let mut per_step_mean = Vec::new();
        let mut per_step_se = Vec::new();
        let mut window_steps = Vec::new();
        for &s in &steps {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.n_value == n && r.step == s)
                .map(|r| r.w1_sum)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (m, se) = mean_se(&vals);
            stats.push(CellSummary {
                cell: format!("n={n},step={s}"),
                mean: m,
                se,
                n: vals.len(),
            });
            if s >= window_start {
                per_step_mean.push(m);
                per_step_se.push(se);
                window_steps.push(s as f64);
            }
        }
        if per_step_mean.is_empty() {
            continue;
        }
        let (argmax, &max) = per_step_mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty window");
        sup_mean.push(max);
        sup_se.push(per_step_se[argmax]);
        // Uniform-in-time check: the per-n curve must not trend upward.
        if window_steps.len() >= 3 {
            let fit = ols_slope(&window_steps, &per_step_mean)?;
            let significant_up = fit.slope > TREND_SIGMA * fit.slope_se;
            if significant_up {
                in_n_trend_ok = false;
            }
            trend_detail.push_str(&format!(
                "N={n}: slope_in_n={:.3e} (se {:.3e}); ",
                fit.slope, fit.slope_se
            ));
        }
    }

    // Signal floor gating: compare the oracle floor against the smallest
    // measured cell (the most demanding comparison).
    let max_floor = rows.iter().map(|r| r.floor).fold(0.0f64, f64::max);
    let min_signal = sup_mean.iter().copied().fold(f64::INFINITY, f64::min);
    let oracle_ok = max_floor < FLOOR_SIGNAL_RATIO * min_signal;

    let mut slopes = Vec::new();
    let expected = -(rate_exponent(d, cfg.tau)?.exponent_fg);
    if sup_mean.len() >= 3 {
        let xs: Vec<f64> = cfg.grid.iter().map(|&n| n as f64).collect();
        let fit = wls_loglog(&xs, &sup_mean, Some(&sup_se))?;
        slopes.push(NamedSlope {
            name: "w1_sum_vs_n".into(),
            fit,
        });
        let rate_verdict = if !oracle_ok {
            Verdict::Inconclusive
        } else if (fit.slope - expected).abs() <= RATE_SLOPE_TOL {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        verdicts.push(NamedVerdict {
            name: "rate_slope".into(),
            verdict: rate_verdict,
            detail: format!(
                "fitted {:.4} (se {:.4}) vs expected {:.4} ± {RATE_SLOPE_TOL}; \
                 oracle floor {:.3e} vs min signal {:.3e}",
                fit.slope, fit.slope_se, expected, max_floor, min_signal
            ),
        });
    } else {
        verdicts.push(NamedVerdict {
            name: "rate_slope".into(),
            verdict: Verdict::Inconclusive,
            detail: "fewer than 3 grid cells with data; cannot fit a slope".into(),
        });
    }

    verdicts.push(NamedVerdict {
        name: "uniform_in_n".into(),
        verdict: if !oracle_ok {
            Verdict::Inconclusive
        } else if in_n_trend_ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        detail: format!(
            "per-N distance curves over steps >= {window_start}: {}",
            if trend_detail.is_empty() {
                "too few checkpoints for a trend fit".to_string()
            } else {
                trend_detail
            }
        ),
    });

    Ok((stats, slopes, verdicts))
}

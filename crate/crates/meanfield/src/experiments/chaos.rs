//! Propagation-of-chaos experiment: as `N` grows, pairs of particles
//! decorrelate and the single-particle marginal approaches the flow's
//! fixed point.
//!
//! Two measurements per `(N, replication)` cell at the final step:
//! - for test-function pairs `(f, g)`, the unbiased pair statistic
//!   `U = (1/(N(N-1))) sum_{i != j} f(x_i) g(x_j)` against the product of
//!   marginal means — their gap `D(N) = |E U - E f E g|` must trend to zero;
//! - the exact distance from the empirical measure to the fixed-point
//!   marginal, reported next to the i.i.d. sampling floor at the same `N`
//!   (chaos cannot push the marginal error below pure sampling noise).

use super::common::{
    bounded_battery, initial_field, jackknife_se, measure_distance, run_ips2, sampled_measure,
};
use super::{fmt_f, CellSummary, ExperimentConfig, ExperimentResult, NamedVerdict, Verdict};
use crate::dynamics::empirical_measure;
use crate::error::Result;
use crate::limit::iterate_to_fixed_point;
use crate::rng::mix;
use crate::stats::mean_se;
use rayon::prelude::*;

/// Pair-gap inversions between consecutive `N` must be explained by this
/// many combined standard errors, and at most one is tolerated.
const INVERSION_SIGMA: f64 = 2.0;
const MAX_INVERSIONS: usize = 1;

/// Marginal-vs-fixed-point distances may exceed the sampling floor by at
/// most this factor.
const MARGINAL_FLOOR_FACTOR: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct ChaosRow {
    pub n_value: usize,
    pub rep: usize,
    /// `pair:<f>*<g>` or `marginal`.
    pub kind: String,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

pub const CHAOS_COLUMNS: [&str; 6] = ["n_value", "rep", "kind", "x1", "x2", "x3"];

fn pair_names() -> Vec<(String, usize, usize)> {
    let fs = bounded_battery();
    (0..fs.len())
        .map(|k| {
            let j = (k + 1) % fs.len();
            (format!("pair:{}*{}", fs[k].name, fs[j].name), k, j)
        })
        .collect()
}

/// Run the chaos measurement over the `(N, replication)` grid.
pub fn run_chaos(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let params = &cfg.params;
    let fs = bounded_battery();
    let pairs = pair_names();

    // Fixed-point marginal, found once from the shared initial state.
    let mu0 = super::common::initial_reference_measure(params, cfg.method, mix(cfg.seed, 5))?;
    let fp = iterate_to_fixed_point(
        params,
        mu0,
        initial_field(params)?,
        1e-3,
        200,
        cfg.method,
        mix(cfg.seed, 6),
    )?;

    let jobs: Vec<(usize, usize)> = (0..cfg.grid.len())
        .flat_map(|ci| (0..cfg.replications).map(move |r| (ci, r)))
        .collect();
    let per_job: Vec<Result<Vec<(String, f64, f64, f64)>>> = jobs
        .par_iter()
        .map(|&(ci, rep)| {
            let n = cfg.grid[ci];
            let seed = mix(mix(cfg.seed, 0x4348414f), ((ci as u64) << 32) | rep as u64);
            let mut final_ens = None;
            run_ips2(params, n, n, cfg.n_steps, seed, |step, ens, _| {
                if step == cfg.n_steps {
                    final_ens = Some(ens.clone());
                }
                Ok(())
            })?;
            let ens = final_ens.expect("visited final step");
            let nn = ens.len() as f64;
            let mut out = Vec::with_capacity(pairs.len() + 1);
            for (name, k, j) in &pairs {
                // S1 = sum f, S2 = sum g, cross = sum f g; the unbiased
                // pair mean over i != j is (S1 S2 - cross)/(N(N-1)).
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                let mut cross = 0.0;
                for i in 0..ens.len() {
                    let x = ens.position(i)[0];
                    let fv = (fs[*k].f)(x);
                    let gv = (fs[*j].f)(x);
                    s1 += fv;
                    s2 += gv;
                    cross += fv * gv;
                }
                let u = (s1 * s2 - cross) / (nn * (nn - 1.0));
                out.push((name.clone(), u, s1 / nn, s2 / nn));
            }
            let emp = empirical_measure(&ens);
            let w1 = measure_distance(&emp, &fp.mu_inf, mix(seed, 21))?;
            let floor_draw = sampled_measure(&fp.mu_inf, n, mix(seed, 22))?;
            let floor = measure_distance(&floor_draw, &fp.mu_inf, mix(seed, 23))?;
            out.push(("marginal".to_string(), w1, floor, 0.0));
            Ok(out)
        })
        .collect();

    let mut rows = Vec::new();
    for (job_idx, res) in per_job.into_iter().enumerate() {
        let (ci, rep) = jobs[job_idx];
        for (kind, x1, x2, x3) in res? {
            rows.push(vec![
                cfg.grid[ci].to_string(),
                rep.to_string(),
                kind,
                fmt_f(x1),
                fmt_f(x2),
                fmt_f(x3),
            ]);
        }
    }

    let mut result = ExperimentResult::new(
        "chaos",
        cfg,
        CHAOS_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    )?;
    let parsed = parse_chaos_rows(&result.rows)?;
    let (stats, mut verdicts) = analyze_chaos(&parsed, cfg)?;
    verdicts.insert(
        0,
        NamedVerdict {
            name: "fixed_point_converged".into(),
            verdict: if fp.converged {
                Verdict::Pass
            } else {
                Verdict::Inconclusive
            },
            detail: format!(
                "fixed-point iteration: {} iterations, converged = {}",
                fp.iterations, fp.converged
            ),
        },
    );
    result.stats = stats;
    result.verdicts = verdicts;
    Ok(result)
}

pub fn parse_chaos_rows(rows: &[Vec<String>]) -> Result<Vec<ChaosRow>> {
    rows.iter()
        .map(|r| {
            if r.len() != CHAOS_COLUMNS.len() {
                return Err(crate::error::Error::invalid("bad chaos row width"));
            }
            let parse = |s: &String| {
                s.parse::<f64>()
                    .map_err(|e| crate::error::Error::invalid(format!("bad cell {s:?}: {e}")))
            };
            Ok(ChaosRow {
                n_value: parse(&r[0])? as usize,
                rep: parse(&r[1])? as usize,
                kind: r[2].clone(),
                x1: parse(&r[3])?,
                x2: parse(&r[4])?,
                x3: parse(&r[5])?,
            })
        })
        .collect()
}

/// Pure row analysis for the chaos experiment.
pub fn analyze_chaos(
    rows: &[ChaosRow],
    cfg: &ExperimentConfig,
) -> Result<(Vec<CellSummary>, Vec<NamedVerdict>)> {
    let pairs = pair_names();
    let mut stats = Vec::new();

    // Battery-averaged pair gap per N with a jackknife error bar.
    let mut gap_mean = Vec::new();
    let mut gap_se = Vec::new();
    for &n in &cfg.grid {
        let mut per_pair_gap = Vec::new();
        let mut per_pair_var = Vec::new();
        for (name, _, _) in &pairs {
            let reps: Vec<&ChaosRow> = rows
                .iter()
                .filter(|r| r.n_value == n && &r.kind == name)
                .collect();
            if reps.is_empty() {
                continue;
            }
            let gap_stat = |keep: &dyn Fn(usize) -> bool| {
                let mut su = 0.0;
                let mut sm1 = 0.0;
                let mut sm2 = 0.0;
                let mut c = 0usize;
                for (i, r) in reps.iter().enumerate() {
                    if keep(i) {
                        su += r.x1;
                        sm1 += r.x2;
                        sm2 += r.x3;
                        c += 1;
                    }
                }
                let cf = c as f64;
                (su / cf - (sm1 / cf) * (sm2 / cf)).abs()
            };
            let g = gap_stat(&|_| true);
            let se = jackknife_se(&reps, gap_stat);
            stats.push(CellSummary {
                cell: format!("{name},n={n}"),
                mean: g,
                se,
                n: reps.len(),
            });
            per_pair_gap.push(g);
            per_pair_var.push(se * se);
        }
        if per_pair_gap.is_empty() {
            continue;
        }
        let k = per_pair_gap.len() as f64;
        let m = per_pair_gap.iter().sum::<f64>() / k;
        // Independent-ish pairs: combine their jackknife variances.
        let se = (per_pair_var.iter().sum::<f64>()).sqrt() / k;
        stats.push(CellSummary {
            cell: format!("pair_gap_mean,n={n}"),
            mean: m,
            se,
            n: per_pair_gap.len(),
        });
        gap_mean.push(m);
        gap_se.push(se);
    }

    // Decorrelation trend: gaps must not significantly increase with N.
    let mut inversions = 0usize;
    let mut unexplained = 0usize;
    let mut trend_detail = String::new();
    for w in 0..gap_mean.len().saturating_sub(1) {
        if gap_mean[w + 1] > gap_mean[w] {
            inversions += 1;
            let rise = gap_mean[w + 1] - gap_mean[w];
            let combined = (gap_se[w] * gap_se[w] + gap_se[w + 1] * gap_se[w + 1]).sqrt();
            if rise > INVERSION_SIGMA * combined {
                unexplained += 1;
                trend_detail.push_str(&format!(
                    "{}→{}: rise {rise:.3e} > {INVERSION_SIGMA}·se {combined:.3e}; ",
                    cfg.grid[w],
                    cfg.grid[w + 1]
                ));
            }
        }
    }
    let mut verdicts = vec![NamedVerdict {
        name: "decorrelation_trend".into(),
        verdict: if gap_mean.len() < 2 {
            Verdict::Inconclusive
        } else if unexplained == 0 && inversions <= MAX_INVERSIONS {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        detail: format!(
            "battery-mean pair gaps {:?}; {} inversions ({} beyond error bars){}{}",
            gap_mean
                .iter()
                .map(|g| format!("{g:.3e}"))
                .collect::<Vec<_>>(),
            inversions,
            unexplained,
            if trend_detail.is_empty() { "" } else { ": " },
            trend_detail
        ),
    }];

    // Marginal closeness: mean distance to the fixed point vs the mean
    // i.i.d. sampling floor at the same N.
    let mut marg_detail = String::new();
    let mut marg_verdict = Verdict::Pass;
    for &n in &cfg.grid {
        let reps: Vec<&ChaosRow> = rows
            .iter()
            .filter(|r| r.n_value == n && r.kind == "marginal")
            .collect();
        if reps.is_empty() {
            marg_verdict = marg_verdict.and(Verdict::Inconclusive);
            continue;
        }
        let w1s: Vec<f64> = reps.iter().map(|r| r.x1).collect();
        let floors: Vec<f64> = reps.iter().map(|r| r.x2).collect();
        let (mw, sew) = mean_se(&w1s);
        let (mf, _) = mean_se(&floors);
        stats.push(CellSummary {
            cell: format!("marginal_w1,n={n}"),
            mean: mw,
            se: sew,
            n: reps.len(),
        });
        stats.push(CellSummary {
            cell: format!("sampling_floor,n={n}"),
            mean: mf,
            se: 0.0,
            n: reps.len(),
        });
        if mw > MARGINAL_FLOOR_FACTOR * mf {
            marg_verdict = marg_verdict.and(Verdict::Fail);
            marg_detail.push_str(&format!(
                "n={n}: marginal W1 {mw:.3e} > {MARGINAL_FLOOR_FACTOR}× floor {mf:.3e}; "
            ));
        }
    }
    verdicts.push(NamedVerdict {
        name: "marginal_matches_fixed_point".into(),
        verdict: marg_verdict,
        detail: if marg_detail.is_empty() {
            "marginal distances sit at the i.i.d. sampling floor".into()
        } else {
            marg_detail
        },
    });

    Ok((stats, verdicts))
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_config;
    use super::*;

    /// Without interaction the particles are independent by construction,
    /// so every pair gap sits at statistical zero.
    #[test]
    fn decoupled_particles_have_zero_pair_gap() {
        let mut cfg = small_config();
        cfg.params.delta = 0.0;
        cfg.grid = vec![16, 64];
        cfg.n_steps = 8;
        cfg.replications = 12;
        let res = run_chaos(&cfg).unwrap();
        for n in &cfg.grid {
            let cell = res
                .stats
                .iter()
                .find(|c| c.cell == format!("pair_gap_mean,n={n}"))
                .unwrap();
            assert!(
                cell.mean <= 4.0 * cell.se.max(1e-6),
                "n={n}: gap {} vs se {}",
                cell.mean,
                cell.se
            );
        }
    }

    #[test]
    fn chaos_gaps_shrink_on_small_grid() {
        let mut cfg = small_config();
        cfg.grid = vec![8, 32, 128];
        cfg.n_steps = 15;
        cfg.replications = 10;
        let res = run_chaos(&cfg).unwrap();
        // Expected row counts: (pairs + marginal) per (cell, rep).
        assert_eq!(
            res.rows.len(),
            cfg.grid.len() * cfg.replications * (pair_names().len() + 1)
        );
        let trend = res
            .verdicts
            .iter()
            .find(|v| v.name == "decorrelation_trend")
            .unwrap();
        assert_ne!(trend.verdict, Verdict::Fail, "{}", trend.detail);
        // The battery-mean gap at the largest N is below the smallest N's.
        let gap = |n: usize| {
            res.stats
                .iter()
                .find(|c| c.cell == format!("pair_gap_mean,n={n}"))
                .unwrap()
                .mean
        };
        assert!(
            gap(128) < gap(8),
            "gap(128)={} vs gap(8)={}",
            gap(128),
            gap(8)
        );
        // Determinism and row-level recomputability.
        let res2 = run_chaos(&cfg).unwrap();
        assert_eq!(res.rows, res2.rows);
        let parsed = parse_chaos_rows(&res.rows).unwrap();
        let (_, verdicts) = analyze_chaos(&parsed, &cfg).unwrap();
        let orig: Vec<_> = res
            .verdicts
            .iter()
            .filter(|v| v.name != "fixed_point_converged")
            .map(|v| v.verdict)
            .collect();
        assert_eq!(verdicts.iter().map(|v| v.verdict).collect::<Vec<_>>(), orig);
    }
}

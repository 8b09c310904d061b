//! Shared machinery for the experiment drivers: reference flows, noise
//! floors, particle-run plumbing, distances, and the bounded-Lipschitz
//! test-function battery.

use crate::dynamics::{step_ips2, ParticleEnsemble};
use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::field::{w1_mixture_grid_1d, MixtureField};
use crate::limit::{LimitMethod, LimitTrajectory};
use crate::rng::{mix, subsystem_rng};
use crate::transport::{w1_estimate, w1_exact_1d, DiscreteMeasure, Sampleable};
use statrs::distribution::{ContinuousCDF, Normal};

/// Probe count for deterministic 1-D field distances in experiments.
pub(crate) const FIELD_PROBES: usize = 1024;

/// Sample count / replication count used by Monte Carlo W1 estimates when
/// the dimension rules out the exact 1-D integral.
pub(crate) const MC_W1_SAMPLES: usize = 128;
pub(crate) const MC_W1_REPS: usize = 4;

/// Noise-floor share of the measured signal beyond which verdicts degrade
/// to inconclusive.
pub(crate) const FLOOR_SIGNAL_RATIO: f64 = 0.3;

/// A bounded, Lipschitz scalar test function applied to the first
/// coordinate.
#[derive(Clone, Copy)]
pub(crate) struct BoundedFn {
    pub name: &'static str,
    /// Exact sup norm on all of R.
    pub sup: f64,
    pub f: fn(f64) -> f64,
}

fn f_tanh(x: f64) -> f64 {
    x.tanh()
}
fn f_sin(x: f64) -> f64 {
    x.sin()
}
fn f_clamp(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}
fn f_bump(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}
fn f_inv_quad(x: f64) -> f64 {
    1.0 / (1.0 + x * x)
}
fn f_cos2(x: f64) -> f64 {
    (2.0 * x).cos()
}
fn f_const(_: f64) -> f64 {
    1.0
}

/// Six non-constant bounded-Lipschitz functions (sup norm 1 each).
pub(crate) fn bounded_battery() -> Vec<BoundedFn> {
    vec![
        BoundedFn {
            name: "tanh",
            sup: 1.0,
            f: f_tanh,
        },
        BoundedFn {
            name: "sin",
            sup: 1.0,
            f: f_sin,
        },
        BoundedFn {
            name: "clamp",
            sup: 1.0,
            f: f_clamp,
        },
        BoundedFn {
            name: "bump",
            sup: 1.0,
            f: f_bump,
        },
        BoundedFn {
            name: "inv_quad",
            sup: 1.0,
            f: f_inv_quad,
        },
        BoundedFn {
            name: "cos2",
            sup: 1.0,
            f: f_cos2,
        },
    ]
}

/// The constant function 1 (P-invariant in expectation; exact-zero anchor).
pub(crate) fn constant_fn() -> BoundedFn {
    BoundedFn {
        name: "const",
        sup: 1.0,
        f: f_const,
    }
}

/// Mid-quantile discretization of `N(mean, sd^2)` on `grid` atoms (d = 1).
pub(crate) fn gaussian_quantile_measure(
    grid: usize,
    mean: f64,
    sd: f64,
) -> Result<DiscreteMeasure> {
    if grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    let law = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    let pts: Vec<f64> = (0..grid)
        .map(|k| law.inverse_cdf((k as f64 + 0.5) / grid as f64))
        .collect();
    DiscreteMeasure::uniform(1, pts)
}

/// The shared initial law of every particle run: standard Gaussian.
pub(crate) fn initial_ensemble(
    params: &ModelParams,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let mut rng = subsystem_rng(seed, 0x494e4954); // "INIT"
    ParticleEnsemble::init_gaussian(params.dim, n, &vec![0.0; params.dim], 1.0, &mut rng)
}

/// The shared initial field of every run: the deposit kernel at the origin.
pub(crate) fn initial_field(params: &ModelParams) -> Result<MixtureField> {
    MixtureField::single(params.pprime, vec![0.0; params.dim])
}

/// The limit-flow initial measure matching [`initial_ensemble`]'s law: a
/// quantile discretization in d = 1, an i.i.d. cloud otherwise.
pub(crate) fn initial_reference_measure(
    params: &ModelParams,
    method: LimitMethod,
    seed: u64,
) -> Result<DiscreteMeasure> {
    match method {
        LimitMethod::QuantileGrid { grid } => gaussian_quantile_measure(grid, 0.0, 1.0),
        LimitMethod::Ensemble { n_ref } => {
            let ens = initial_ensemble(params, n_ref, mix(seed, 0x5245464d))?;
            Ok(crate::dynamics::empirical_measure(&ens))
        }
    }
}

/// A reference flow plus an independent second construction used as the
/// oracle noise floor: a halved-grid run for the deterministic quantile
/// method, an independently seeded run for the ensemble method.
pub(crate) struct ReferencePair {
    pub primary: LimitTrajectory,
    pub floor: LimitTrajectory,
}

impl ReferencePair {
    pub fn build(params: &ModelParams, n_steps: usize, method: LimitMethod, seed: u64) -> Result<Self> {
        let mu0 = initial_reference_measure(params, method, seed)?;
        let eta0 = initial_field(params)?;
        let primary =
            LimitTrajectory::run(params, mu0, eta0.clone(), n_steps, method, mix(seed, 1))?;
        let (floor_method, floor_seed) = match method {
            LimitMethod::QuantileGrid { grid } => (
                LimitMethod::QuantileGrid {
                    grid: (grid / 2).max(32),
                },
                mix(seed, 1),
            ),
            LimitMethod::Ensemble { n_ref } => (LimitMethod::Ensemble { n_ref }, mix(seed, 2)),
        };
        let mu0f = initial_reference_measure(params, floor_method, mix(seed, 3))?;
        let floor = LimitTrajectory::run(params, mu0f, eta0, n_steps, floor_method, floor_seed)?;
        Ok(Self { primary, floor })
    }

    /// Self-distance (measure + field) between the two constructions at
    /// step `n`: the oracle noise floor reported alongside every distance.
    pub fn floor_at(&self, n: usize, seed: u64) -> Result<f64> {
        let dm = measure_distance(self.primary.mu(n), self.floor.mu(n), mix(seed, n as u64))?;
        let de = field_distance(
            self.primary.eta(n),
            self.floor.eta(n),
            mix(seed, (n as u64) << 1),
        )?;
        Ok(dm + de)
    }
}

/// W1 between discrete measures: exact in d = 1, matched-sample Monte Carlo
/// otherwise.
pub(crate) fn measure_distance(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    seed: u64,
) -> Result<f64> {
    if a.dim() == 1 && b.dim() == 1 {
        w1_exact_1d(a, b)
    } else {
        let (d, _) = w1_estimate(a, b, MC_W1_SAMPLES, MC_W1_REPS, seed)?;
        Ok(d)
    }
}

/// W1 between mixture fields: deterministic grid integral in d = 1,
/// matched-sample Monte Carlo otherwise.
pub(crate) fn field_distance(a: &MixtureField, b: &MixtureField, seed: u64) -> Result<f64> {
    if a.dim() == 1 && b.dim() == 1 {
        w1_mixture_grid_1d(a, b, FIELD_PROBES)
    } else {
        let (d, _) = w1_estimate(a, b, MC_W1_SAMPLES, MC_W1_REPS, seed)?;
        Ok(d)
    }
}

/// Evenly spaced checkpoint steps in `[1, n_steps]`, ending at `n_steps`.
pub(crate) fn checkpoint_steps(n_steps: usize, want: usize) -> Vec<usize> {
    let want = want.clamp(1, n_steps);
    let mut out: Vec<usize> = (1..=want)
        .map(|k| (k * n_steps).div_euclid(want).max(1))
        .collect();
    out.dedup();
    out
}

/// Run the sampled-field particle system (`M = m`) for `n_steps`, invoking
/// `visit(step, ensemble, field)` at step 0 and after every step. The
/// field's component count stays at `m + n` by construction, so no
/// compaction is applied.
pub(crate) fn run_ips2<F>(
    params: &ModelParams,
    n: usize,
    m: usize,
    n_steps: usize,
    seed: u64,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &ParticleEnsemble, &MixtureField) -> Result<()>,
{
    let mut rng = subsystem_rng(seed, 0x49505332); // "IPS2"
    let mut ens = initial_ensemble(params, n, seed)?;
    let mut field = initial_field(params)?;
    visit(0, &ens, &field)?;
    for step in 1..=n_steps {
        let (e2, f2) = step_ips2(&ens, &field, m, params, &mut rng)?;
        ens = e2;
        field = f2;
        visit(step, &ens, &field)?;
    }
    Ok(())
}

/// Draw `n` i.i.d. points from `law` as a uniform discrete measure.
pub(crate) fn sampled_measure<S: Sampleable>(
    law: &S,
    n: usize,
    seed: u64,
) -> Result<DiscreteMeasure> {
    let d = law.dim();
    let mut rng = subsystem_rng(seed, 0x53414d50); // "SAMP"
    let mut flat = vec![0.0; n * d];
    for i in 0..n {
        law.sample_point(&mut rng, &mut flat[i * d..(i + 1) * d]);
    }
    DiscreteMeasure::uniform(d, flat)
}

/// Jackknife standard error of a statistic of per-replication rows.
pub(crate) fn jackknife_se<T, F>(rows: &[T], stat: F) -> f64
where
    F: Fn(&dyn Fn(usize) -> bool) -> f64,
    T: Sized,
{
    let r = rows.len();
    if r < 2 {
        return f64::NAN;
    }
    let mut loo = Vec::with_capacity(r);
    for skip in 0..r {
        loo.push(stat(&|i| i != skip));
    }
    let mean = loo.iter().sum::<f64>() / r as f64;
    let ss: f64 = loo.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((r as f64 - 1.0) / r as f64 * ss).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_se;

    #[test]
    fn gaussian_quantile_measure_matches_moments() {
        let m = gaussian_quantile_measure(4096, 0.0, 1.0).unwrap();
        let mean = m.mean()[0];
        assert!(mean.abs() < 1e-12, "{mean}");
        let absm = m.first_abs_moment();
        let want = (2.0 / std::f64::consts::PI).sqrt();
        assert!((absm - want).abs() < 1e-3, "{absm} vs {want}");
        let shifted = gaussian_quantile_measure(512, 2.0, 0.5).unwrap();
        assert!((shifted.mean()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_are_increasing_and_end_at_n() {
        for (n, want) in [(200, 10), (7, 10), (1, 4), (50, 5)] {
            let cps = checkpoint_steps(n, want);
            assert!(!cps.is_empty());
            assert_eq!(*cps.last().unwrap(), n);
            assert!(cps.windows(2).all(|w| w[0] < w[1]), "{cps:?}");
        }
    }

    #[test]
    fn jackknife_matches_classic_se_for_the_mean() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0, 3.0, 5.0];
        let (_, se) = mean_se(&xs);
        let jse = jackknife_se(&xs, |keep| {
            let mut s = 0.0;
            let mut c = 0usize;
            for (i, &x) in xs.iter().enumerate() {
                if keep(i) {
                    s += x;
                    c += 1;
                }
            }
            s / c as f64
        });
        assert!((jse - se).abs() < 1e-12, "{jse} vs {se}");
    }

    #[test]
    fn battery_is_bounded_by_declared_sup() {
        for f in bounded_battery() {
            for i in -400..=400 {
                let x = i as f64 * 0.05;
                assert!((f.f)(x).abs() <= f.sup + 1e-15, "{} at {x}", f.name);
            }
        }
    }
}

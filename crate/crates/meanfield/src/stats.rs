//! Small statistical toolbox: mean/standard-error summaries,
//! Kolmogorov–Smirnov tests, an energy-distance two-sample test, and
//! (weighted) least-squares slope fits on log-log data.

use crate::error::{Error, Result};

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// One-sample Kolmogorov–Smirnov statistic against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic Kolmogorov distribution tail `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=101 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        s += sign * term;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS p-value with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn))
}

/// Two-sample KS test; returns (D, p).
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let sn = ne.sqrt();
    (d, kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn)))
}

fn mean_abs_cross(xs: &[f64], ys: &[f64]) -> f64 {
    // For sorted inputs, sum of |x - y| over all pairs in O(n + m).
    let ys_total: f64 = ys.iter().sum();
    let mut total = 0.0;
    let mut j = 0usize;
    let mut prefix = 0.0; // sum of ys[..j]
    for &x in xs {
        while j < ys.len() && ys[j] <= x {
            prefix += ys[j];
            j += 1;
        }
        let below = j as f64;
        let above = (ys.len() - j) as f64;
        total += x * below - prefix + (ys_total - prefix) - x * above;
    }
    total / (xs.len() as f64 * ys.len() as f64)
}

/// Energy-distance two-sample test in one dimension with a permutation
/// p-value (`perms` shuffles, seeded).
pub fn energy_test_1d(xs: &[f64], ys: &[f64], perms: usize, seed: u64) -> (f64, f64) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let stat = |a: &[f64], b: &[f64]| -> f64 {
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        2.0 * mean_abs_cross(&sa, &sb) - mean_abs_cross(&sa, &sa) - mean_abs_cross(&sb, &sb)
    };
    let observed = stat(xs, ys);
    let mut pool: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..perms {
        pool.shuffle(&mut rng);
        let (a, b) = pool.split_at(xs.len());
        if stat(a, b) >= observed {
            exceed += 1;
        }
    }
    let p = (exceed as f64 + 1.0) / (perms as f64 + 1.0);
    (observed, p)
}

/// Straight-line fit `y = intercept + slope · x`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
}

/// Ordinary least squares on raw data: `y = intercept + slope · x`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid(
            "slope fit needs at least 3 matched (x, y) points",
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("slope fit needs finite data"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("x values are all identical"));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = (n - 2.0).max(1.0);
    let chi2: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let slope_se = (chi2 / dof / sxx).sqrt();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
        r2,
    })
}

/// Weighted least squares on log-log data. `ys_se` are standard errors of
/// the raw `ys`; weights follow from the delta method
/// (`var(log y) ≈ (se/y)²`). Zero / missing SEs fall back to equal weights.
pub fn wls_loglog(xs: &[f64], ys: &[f64], ys_se: Option<&[f64]>) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid(
            "slope fit needs at least 3 matched (x, y) points",
        ));
    }
    if xs.iter().any(|&x| x <= 0.0) || ys.iter().any(|&y| y <= 0.0) {
        return Err(Error::invalid("log-log fit needs positive data"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let w: Vec<f64> = match ys_se {
        Some(se) if se.len() == ys.len() && se.iter().all(|&s| s.is_finite() && s > 0.0) => ys
            .iter()
            .zip(se)
            .map(|(&y, &s)| {
                let v = (s / y) * (s / y);
                1.0 / v.max(1e-12)
            })
            .collect(),
        _ => vec![1.0; xs.len()],
    };
    let sw: f64 = w.iter().sum();
    let mx = lx.iter().zip(&w).map(|(x, wi)| wi * x).sum::<f64>() / sw;
    let my = ly.iter().zip(&w).map(|(y, wi)| wi * y).sum::<f64>() / sw;
    let sxx: f64 = lx.iter().zip(&w).map(|(x, wi)| wi * (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx
        .iter()
        .zip(&ly)
        .zip(&w)
        .map(|((x, y), wi)| wi * (x - mx) * (y - my))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("x values are all identical"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // Weighted residual variance -> SE of the slope.
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let chi2: f64 = lx
        .iter()
        .zip(&ly)
        .zip(&w)
        .map(|((x, y), wi)| {
            let r = y - (intercept + slope * x);
            wi * r * r
        })
        .sum();
    let slope_se = (chi2 / dof / sxx).sqrt();
    let syy: f64 = ly.iter().zip(&w).map(|(y, wi)| wi * (y - my) * (y - my)).sum();
    let r2 = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn mean_se_basics() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        // var = 5/3, se = sqrt(5/12)
        assert_abs_diff_eq!(se, (5.0f64 / 12.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ols_recovers_exact_line_and_flags_noise() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.25 * x).collect();
        let fit = ols_slope(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3.0, epsilon = 1e-12);
        assert!(fit.slope_se < 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
        // Pure noise around a constant: slope within 4 SE of zero.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ns: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let xs2: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let fit2 = ols_slope(&xs2, &ns).unwrap();
        assert!(fit2.slope.abs() < 4.0 * fit2.slope_se, "{fit2:?}");
        assert!(ols_slope(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ks_accepts_true_law_rejects_shifted() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..5000)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let d0 = ks_statistic(&xs, crate::kernels::normal_cdf);
        assert!(ks_pvalue(d0, xs.len()) > 0.01);
        let d1 = ks_statistic(&xs, |x| crate::kernels::normal_cdf(x - 0.5));
        assert!(ks_pvalue(d1, xs.len()) < 1e-6);
    }

    #[test]
    fn two_sample_ks_same_law() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..4000).map(|_| rng.gen::<f64>()).collect();
        let ys: Vec<f64> = (0..3000).map(|_| rng.gen::<f64>()).collect();
        let (_, p) = ks_two_sample(&xs, &ys);
        assert!(p > 0.01, "p = {p}");
        let zs: Vec<f64> = (0..3000).map(|_| rng.gen::<f64>() + 0.2).collect();
        let (_, p2) = ks_two_sample(&xs, &zs);
        assert!(p2 < 1e-6);
    }

    #[test]
    fn energy_test_calibration() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let xs: Vec<f64> = (0..800)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let ys: Vec<f64> = (0..800)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let (_, p_same) = energy_test_1d(&xs, &ys, 200, 77);
        assert!(p_same > 0.01, "same-law p = {p_same}");
        let zs: Vec<f64> = ys.iter().map(|y| y + 0.6).collect();
        let (_, p_diff) = energy_test_1d(&xs, &zs, 200, 78);
        assert!(p_diff < 0.02, "shifted-law p = {p_diff}");
    }

    #[test]
    fn cross_mean_abs_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut ys: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..3.0)).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let fast = mean_abs_cross(&xs, &ys);
        let mut naive = 0.0;
        for &x in &xs {
            for &y in &ys {
                naive += (x - y).abs();
            }
        }
        naive /= (xs.len() * ys.len()) as f64;
        assert_abs_diff_eq!(fast, naive, epsilon = 1e-12);
    }

    #[test]
    fn wls_recovers_power_law() {
        let xs: Vec<f64> = vec![10.0, 20.0, 40.0, 80.0, 160.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.5)).collect();
        let fit = wls_loglog(&xs, &ys, None).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3.0f64.ln(), epsilon = 1e-12);
        assert!(fit.slope_se < 1e-10);
        // Weighted version downweights a noisy point.
        let mut ys2 = ys.clone();
        ys2[4] *= 1.5;
        let mut se = vec![1e-6; 5];
        se[4] = 1.0;
        let fit2 = wls_loglog(&xs, &ys2, Some(&se)).unwrap();
        assert_abs_diff_eq!(fit2.slope, -0.5, epsilon = 1e-3);
    }

    #[test]
    fn wls_input_guards() {
        assert!(wls_loglog(&[1.0, 2.0], &[1.0, 2.0], None).is_err());
        assert!(wls_loglog(&[1.0, 2.0, 3.0], &[1.0, -2.0, 3.0], None).is_err());
        assert!(wls_loglog(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], None).is_err());
    }
}

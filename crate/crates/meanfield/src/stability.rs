//! Closed-form hypothesis constants for a model instance: contraction
//! coefficients, smallness thresholds, moment ceilings, exponential
//! forgetting rates, convergence-rate predictions, and the i.i.d. coupling
//! constants. Everything here is a pure function of `ModelParams` plus a
//! moment order `tau`; Monte Carlo appears only in the test oracles.

use crate::dynamics::ModelParams;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Log-factor marker attached to a polynomial decay rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFactor {
    None,
    Log,
    LogSquared,
}

/// Predicted decay of `E W₁` in the particle count `N₁`: the rate is
/// `N₁^{-exponent} (log N₁)^{log power}`.
///
/// Two readings of the exponent are reported. `exponent_printed` follows
/// the source's displayed table, which uses `max{·,·}` in the moment-limited
/// regimes; `exponent_fg` replaces that with `min{·,·}`, the combination the
/// empirical-measure moment bounds actually support (the slower term of a
/// two-term sum governs). Experiments compare against the `min` reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateExponent {
    pub exponent_printed: f64,
    pub exponent_fg: f64,
    pub log_factor: LogFactor,
}

/// Every hypothesis constant and feasibility flag for one `(params, tau)`
/// instance. Inputs that the flags depend on are echoed so each boolean can
/// be re-derived from the numeric fields alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub dim: usize,
    pub tau: f64,
    pub delta: f64,
    pub alpha: f64,
    pub norm_a: f64,
    /// Mean joint Lipschitz constant `σ = E A₁(ε)` of the drift (constant
    /// in `ε` for the shipped drifts, so also the essential supremum).
    pub sigma: f64,
    /// `σ₁(τ) = E A₁(ε)^{1+τ}`.
    pub sigma1_tau: f64,
    /// `σ₂(τ) = E (A₂(ε) + |B(ε)|)^{1+τ}`.
    pub sigma2_tau: f64,
    /// `l^{∇,α} = (1−α) l∇(P) + α l∇(P′)`: gradient-Lipschitz mix.
    pub l_grad_alpha: f64,
    /// Push-forward Lipschitz constants `l(P)`, `l(P′)`, and their max.
    pub l_push_p: f64,
    pub l_push_pprime: f64,
    pub l_push_max: f64,
    /// Moment-growth constants of the kernels at order `1+τ`.
    pub m_tau_p: f64,
    pub m_tau_pprime: f64,
    /// First-moment smallness threshold `a₀ = (1−‖A‖)/(σ(2+l^{∇,α}))`;
    /// `+∞` when `σ = 0`.
    pub a0: f64,
    /// Higher-moment threshold
    /// `a(τ) = (4^{−τ} − ‖A‖^{1+τ})/(σ₁(τ)[1+(1+l^{∇,α})^{1+τ}])`.
    pub a_tau: f64,
    /// Two-step contraction coefficients of the coupled recursion.
    pub c1: f64,
    pub c2: f64,
    /// Root rate `θ* = (c₁ + √(c₁²+4c₂))/2`; below 1 iff `c₁ + c₂ < 1`.
    pub theta_star: f64,
    /// One-step particle first-moment rate `γ = ‖A‖ + δσ(2+l^{∇,α})`.
    pub gamma_moment: f64,
    /// Evolved-field gradient offset `c^α = (1−α)c(P) + αc(P′)`.
    pub c_alpha: f64,
    /// Long-run particle first-moment plateau (infinite when `γ ≥ 1`).
    pub moment_plateau: f64,
    /// `c₁ + c₂ < 1`.
    pub cond_contraction: bool,
    /// `δ ∈ (0, a₀)`.
    pub cond_delta_a0: bool,
    /// `δ^{1+τ} < a(τ)` with `δ > 0`.
    pub cond_delta_atau: bool,
    /// `(1−α) m_τ(P) < 1`.
    pub cond_moment_tau: bool,
    /// Exponential-regime threshold: solves `α*|h₁(0)| + h₂(α*) = −log(1−α)`
    /// for the field kernel `P`.
    pub alpha_star: f64,
    /// Uniform bound `K` on `A₁(ε)` (equals `σ` for the shipped drifts).
    pub k_bound: f64,
    /// I.i.d. coupling constants; infinite on the resonant boundary.
    pub big_c1: f64,
    pub chi1: f64,
    pub rate_exponent: RateExponent,
    /// How σ, σ₁, σ₂ were obtained.
    pub method: String,
}

/// `E ‖Z‖^p` for `Z ~ N(0, I_d)`: `2^{p/2} Γ((d+p)/2) / Γ(d/2)`.
pub fn std_normal_norm_moment(dim: usize, p: f64) -> Result<f64> {
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    if !(p.is_finite() && p >= 0.0) {
        return Err(Error::invalid("moment order must be finite and nonnegative"));
    }
    let d = dim as f64;
    Ok((0.5 * p * std::f64::consts::LN_2 + ln_gamma((d + p) / 2.0) - ln_gamma(d / 2.0)).exp())
}

/// Smallest `θ > 0` with `θ² − c₁θ − c₂ ≥ 0`, i.e. the root rate of the
/// two-step recursion `a_n ≤ c₁ a_{n−1} + c₂ a_{n−2}`:
/// `θ* = (c₁ + √(c₁² + 4c₂))/2`. Self-flagging: `θ* < 1` iff `c₁ + c₂ < 1`,
/// so an infeasible pair simply returns a value at or above 1.
pub fn contraction_rate(c1: f64, c2: f64) -> f64 {
    0.5 * (c1 + (c1 * c1 + 4.0 * c2).sqrt())
}

/// The theorem's decay-rate case for dimension `d` and moment order `τ`.
/// Boundary cases (`τ = 1` for `d ≤ 2`, `τ = 1/(d−1)` for `d > 2`) are
/// detected to relative tolerance 1e-12 so analytically intended boundaries
/// expressed in floating point (`1.0/3.0` for `d = 4`) land on the log case.
pub fn rate_exponent(d: usize, tau: f64) -> Result<RateExponent> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau must be finite and positive"));
    }
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    let t = tau / (1.0 + tau);
    let rate = if d <= 2 {
        if near(tau, 1.0) {
            RateExponent {
                exponent_printed: 0.5,
                exponent_fg: 0.5,
                log_factor: if d == 1 {
                    LogFactor::Log
                } else {
                    LogFactor::LogSquared
                },
            }
        } else if d == 1 {
            RateExponent {
                exponent_printed: 0.5f64.max(t),
                exponent_fg: 0.5f64.min(t),
                log_factor: LogFactor::None,
            }
        } else {
            // d = 2: the displayed bound is the sum N^{-1/2} log N +
            // N^{-τ/(1+τ)}; the slower term governs and the log factor
            // rides along exactly when the 1/2 branch is the active one.
            RateExponent {
                exponent_printed: 0.5f64.min(t),
                exponent_fg: 0.5f64.min(t),
                log_factor: if t >= 0.5 { LogFactor::Log } else { LogFactor::None },
            }
        }
    } else {
        let b = 1.0 / d as f64;
        if near(tau, 1.0 / (d - 1) as f64) {
            RateExponent {
                exponent_printed: b,
                exponent_fg: b,
                log_factor: LogFactor::Log,
            }
        } else {
            RateExponent {
                exponent_printed: b.max(t),
                exponent_fg: b.min(t),
                log_factor: LogFactor::None,
            }
        }
    };
    Ok(rate)
}

/// Exponential forgetting threshold for the field kernel: the solution of
/// `α*|h₁(0)| + h₂(α*) = −log(1−α)`. Both shipped families have
/// `h₁(0) = 0`, giving closed forms: Gaussian `√(−2 log(1−α))/l`,
/// bi-exponential `√α / l`. At `α = 1` the Gaussian threshold is infinite
/// and the bi-exponential one saturates at its admissibility bound `1/l`.
pub fn alpha_star(p: &KernelSpec, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    let l = p.bandwidth();
    Ok(match p.family() {
        KernelFamily::Gaussian => (-2.0 * (1.0 - alpha).ln()).sqrt() / l,
        KernelFamily::BiExponential => alpha.sqrt() / l,
    })
}

/// The i.i.d.-start coupling constants `(C₁, χ₁)`:
/// with `χ = ‖A‖ + δK(1 + l^{∇,α})`,
/// `c₅ = max{α l∇(P′), (1−α) l(P)}` and `χ₂ = max{χ, c₅}`,
///
/// `C₁ = δK max{1, (1−α)l∇(P)·α l(P′)} · χ₂ / |χ − c₅|`,
/// `χ₁ = χ₂ + C₁`.
///
/// `χ₁` is the geometric base of the coupled-pair history sum: unrolling the
/// pairwise recursion `e_{n+1} ≤ χ e_n + δK·(history of oracle distances)`
/// and collapsing the double sum yields the factor `χ₂(1 + δK c₇) = χ₂ + C₁`
/// per step, so any smaller base (in particular one carrying an extra `δK`)
/// understates the admissible history and fails the pathwise audit.
///
/// `δK = 0` gives `C₁ = 0` (the coupled pair never separates, so the history
/// term vanishes and `χ₁` is moot; it is still reported as `χ₂`). On the
/// resonant boundary `χ = c₅` the geometric sums behind the constants
/// degenerate and both are reported as `+∞` rather than an error.
pub fn iid_constants(params: &ModelParams, k: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::invalid(
            "the uniform drift bound K must be finite and nonnegative",
        ));
    }
    let dk = params.delta * k;
    let cp = params.p.constants();
    let cq = params.pprime.constants();
    let alpha = params.alpha;
    let l_grad_alpha = (1.0 - alpha) * cp.lip_grad + alpha * cq.lip_grad;
    let chi = params.operator_norm_a() + dk * (1.0 + l_grad_alpha);
    let c5 = (alpha * cq.lip_grad).max((1.0 - alpha) * cp.lip_pushforward);
    let chi2 = chi.max(c5);
    if dk == 0.0 {
        return Ok((0.0, chi2));
    }
    let prefactor = 1.0f64.max((1.0 - alpha) * cp.lip_grad * alpha * cq.lip_pushforward);
    let denom = (chi - c5).abs();
    let big_c1 = if denom == 0.0 {
        f64::INFINITY
    } else {
        dk * prefactor * chi2 / denom
    };
    Ok((big_c1, chi2 + big_c1))
}

/// First-moment ceiling of the particle system after `n` steps:
/// `γⁿ E|X₀| + (Σ_{k<n} γᵏ)(δσ c^α + δ E|c(ε)| + E|B(ε)|)` with
/// `γ = ‖A‖ + δσ(2 + l^{∇,α})`. Valid from the first step on (the evolved
/// field's gradient is uniformly within `c^α`), and from step 0 when the
/// initial field's gradient supremum already is.
pub fn particle_moment_ceiling(params: &ModelParams, e_abs_x0: f64, n: u64) -> Result<f64> {
    params.validate()?;
    if !(e_abs_x0.is_finite() && e_abs_x0 >= 0.0) {
        return Err(Error::invalid("initial moment must be finite and nonnegative"));
    }
    let cp = params.p.constants();
    let cq = params.pprime.constants();
    let sigma = params.drift.lipschitz_bound(params.noise.l_scale);
    let l_grad_alpha = (1.0 - params.alpha) * cp.lip_grad + params.alpha * cq.lip_grad;
    let c_alpha = (1.0 - params.alpha) * cp.grad_at_zero + params.alpha * cq.grad_at_zero;
    let gamma = params.operator_norm_a() + params.delta * sigma * (2.0 + l_grad_alpha);
    let e_abs_eps = std_normal_norm_moment(params.dim, 1.0)?;
    let inflow = params.delta * sigma * c_alpha
        + params.delta * params.noise.c_scale.abs() * e_abs_eps
        + params.noise.b.abs() * e_abs_eps;
    let geom = if (gamma - 1.0).abs() < 1e-14 {
        n as f64
    } else {
        (1.0 - gamma.powi(n as i32)) / (1.0 - gamma)
    };
    Ok(gamma.powi(n as i32) * e_abs_x0 + geom * inflow)
}

/// First-moment ceiling of the field at step `k+1` given a uniform particle
/// first-moment bound `mu_sup ≥ sup_n ⟨|x|, μ_n⟩`:
///
/// `α l(P′) mu_sup Σ_{i=0}^{k} [(1−α)l(P)]^i
///  + α Σ_{i≥0} (1−α)^i J_i + [(1−α)l(P)]^{k+1} ⟨|x|, η₀⟩`,
///
/// where `J_i` is the mean norm after one `P′` step and `i` `P` steps from
/// the origin — exact for Gaussian pairs, a root-second-moment bound
/// otherwise.
pub fn field_moment_ceiling(
    params: &ModelParams,
    mu_sup: f64,
    eta0_abs_moment: f64,
    k: u64,
) -> Result<f64> {
    params.validate()?;
    if !(mu_sup.is_finite() && mu_sup >= 0.0) || !(eta0_abs_moment.is_finite() && eta0_abs_moment >= 0.0)
    {
        return Err(Error::invalid("moment bounds must be finite and nonnegative"));
    }
    let alpha = params.alpha;
    let cp = params.p.constants();
    let cq = params.pprime.constants();
    let lp = cp.lip_pushforward;
    let lq = cq.lip_pushforward;
    let r = (1.0 - alpha) * lp;
    let geom_k = if (r - 1.0).abs() < 1e-14 {
        (k + 1) as f64
    } else {
        (1.0 - r.powi(k as i32 + 1)) / (1.0 - r)
    };
    let mut middle = 0.0;
    if alpha > 0.0 {
        let both_gaussian = params.p.family() == KernelFamily::Gaussian
            && params.pprime.family() == KernelFamily::Gaussian;
        let m1 = std_normal_norm_moment(params.dim, 1.0)?;
        // Per-step norm² increments for the second-moment fallback.
        let var_of = |s: &KernelSpec| match s.family() {
            KernelFamily::Gaussian => params.dim as f64 * s.bandwidth() * s.bandwidth(),
            KernelFamily::BiExponential => 2.0 * s.bandwidth() * s.bandwidth(),
        };
        let (vq, vp) = (var_of(&params.pprime), var_of(&params.p));
        let lpp = params.p.bandwidth();
        let lqq = params.pprime.bandwidth();
        let mut weight = alpha;
        for i in 0..10_000_000u64 {
            let j_i = if both_gaussian {
                m1 * (lqq * lqq + i as f64 * lpp * lpp).sqrt()
            } else {
                (vq + i as f64 * vp).sqrt()
            };
            let term = weight * j_i;
            middle += term;
            if term < 1e-16 * middle.max(1.0) {
                break;
            }
            weight *= 1.0 - alpha;
        }
    }
    Ok(alpha * lq * mu_sup * geom_k + middle + r.powi(k as i32 + 1) * eta0_abs_moment)
}

/// Populate every hypothesis constant and flag for `(params, tau)`.
/// The shipped drift and noise variants have constant `A₁(ε)` and Gaussian
/// `c(ε)`, `B(ε)`, so σ, σ₁(τ), σ₂(τ) are closed-form.
pub fn compute_constants(params: &ModelParams, tau: f64) -> Result<StabilityReport> {
    params.validate()?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau must be finite and positive"));
    }
    let norm_a = params.operator_norm_a();
    let cp = params.p.constants();
    let cq = params.pprime.constants();
    let alpha = params.alpha;
    let delta = params.delta;
    let p = 1.0 + tau;

    let sigma = params.drift.lipschitz_bound(params.noise.l_scale);
    let k_bound = sigma;
    let sigma1_tau = sigma.powf(p);
    let eps_moment = std_normal_norm_moment(params.dim, p)?;
    let sigma2_tau =
        (params.noise.c_scale.abs() + params.noise.b.abs()).powf(p) * eps_moment;

    let l_grad_alpha = (1.0 - alpha) * cp.lip_grad + alpha * cq.lip_grad;
    let l_push_p = cp.lip_pushforward;
    let l_push_pprime = cq.lip_pushforward;
    let l_push_max = l_push_p.max(l_push_pprime);
    let m_tau_p = cp.moment_1ptau(tau)?;
    let m_tau_pprime = cq.moment_1ptau(tau)?;

    let a0 = if sigma == 0.0 {
        f64::INFINITY
    } else {
        (1.0 - norm_a) / (sigma * (2.0 + l_grad_alpha))
    };
    let atau_num = 4f64.powf(-tau) - norm_a.powf(p);
    let a_tau = if sigma1_tau == 0.0 {
        if atau_num >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        atau_num / (sigma1_tau * (1.0 + (1.0 + l_grad_alpha).powf(p)))
    };

    let c1 = (norm_a + delta * sigma * (2.0 + l_grad_alpha) + alpha * l_push_pprime)
        .max((1.0 - alpha) * l_push_p);
    let c2 = delta * sigma * (alpha * cq.lip_grad).max((1.0 - alpha) * cp.lip_grad);
    let theta_star = contraction_rate(c1, c2);

    let gamma_moment = norm_a + delta * sigma * (2.0 + l_grad_alpha);
    let c_alpha = (1.0 - alpha) * cp.grad_at_zero + alpha * cq.grad_at_zero;
    let e_abs_eps = std_normal_norm_moment(params.dim, 1.0)?;
    let moment_plateau = if gamma_moment < 1.0 {
        (delta * sigma * c_alpha
            + delta * params.noise.c_scale.abs() * e_abs_eps
            + params.noise.b.abs() * e_abs_eps)
            / (1.0 - gamma_moment)
    } else {
        f64::INFINITY
    };

    let (big_c1, chi1) = iid_constants(params, k_bound)?;

    Ok(StabilityReport {
        dim: params.dim,
        tau,
        delta,
        alpha,
        norm_a,
        sigma,
        sigma1_tau,
        sigma2_tau,
        l_grad_alpha,
        l_push_p,
        l_push_pprime,
        l_push_max,
        m_tau_p,
        m_tau_pprime,
        a0,
        a_tau,
        c1,
        c2,
        theta_star,
        gamma_moment,
        c_alpha,
        moment_plateau,
        cond_contraction: c1 + c2 < 1.0,
        cond_delta_a0: delta > 0.0 && delta < a0,
        cond_delta_atau: delta > 0.0 && delta.powf(p) < a_tau,
        cond_moment_tau: (1.0 - alpha) * m_tau_p < 1.0,
        alpha_star: alpha_star(&params.p, alpha)?,
        k_bound,
        big_c1,
        chi1,
        rate_exponent: rate_exponent(params.dim, tau)?,
        method: "closed_form".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AMatrix, DriftSpec, NoiseSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn gauss(l: f64, d: usize) -> KernelSpec {
        KernelSpec::gaussian(l, d).unwrap()
    }

    fn params_1d() -> ModelParams {
        ModelParams {
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
            p: gauss(0.8, 1),
            pprime: gauss(0.5, 1),
        }
    }

    #[test]
    fn contraction_rate_pinned() {
        assert_abs_diff_eq!(contraction_rate(0.5, 0.0), 0.5, epsilon = 0.0);
        assert_abs_diff_eq!(contraction_rate(0.0, 0.25), 0.5, epsilon = 1e-15);
        let t = contraction_rate(0.3, 0.2);
        assert_abs_diff_eq!(t, (0.3 + 0.89f64.sqrt()) / 2.0, epsilon = 1e-15);
        assert!((t - 0.6217).abs() < 5e-4);
        // The recursion a_n = c1 a_{n-1} + c2 a_{n-2}, a0 = a1 = 1 is
        // dominated by prefactor * theta^n with prefactor = max(1, 1/theta).
        let (c1, c2) = (0.3, 0.2);
        let pref = (1.0f64).max(1.0 / t);
        let (mut am2, mut am1) = (1.0, 1.0);
        for n in 2..=50 {
            let an = c1 * am1 + c2 * am2;
            assert!(
                an <= 1.01 * pref * t.powi(n),
                "n = {n}: {an} > {}",
                1.01 * pref * t.powi(n)
            );
            am2 = am1;
            am1 = an;
        }
    }

    #[test]
    fn theta_star_defining_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let c1: f64 = rng.gen_range(0.0..1.5);
            let c2: f64 = rng.gen_range(1e-6..1.0);
            let t = contraction_rate(c1, c2);
            let lhs = c1 / t + c2 / (t * t);
            assert!((lhs - 1.0).abs() <= 1e-12, "c1={c1}, c2={c2}: {lhs}");
            // Self-flagging: below 1 exactly when feasible.
            assert_eq!(t < 1.0, c1 + c2 < 1.0);
        }
    }

    #[test]
    fn rate_exponent_pinned_cases() {
        let r = rate_exponent(1, 3.0).unwrap();
        assert_abs_diff_eq!(r.exponent_printed, 0.75, epsilon = 0.0);
        assert_abs_diff_eq!(r.exponent_fg, 0.5, epsilon = 0.0);
        assert_eq!(r.log_factor, LogFactor::None);

        let r = rate_exponent(2, 1.0).unwrap();
        assert_abs_diff_eq!(r.exponent_printed, 0.5, epsilon = 0.0);
        assert_eq!(r.log_factor, LogFactor::LogSquared);

        let r = rate_exponent(5, 0.25).unwrap();
        assert_abs_diff_eq!(r.exponent_printed, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r.exponent_fg, 0.2, epsilon = 1e-15);
        assert_eq!(r.log_factor, LogFactor::Log);

        let r = rate_exponent(1, 1.0).unwrap();
        assert_eq!(r.log_factor, LogFactor::Log);
        let r = rate_exponent(2, 3.0).unwrap();
        assert_abs_diff_eq!(r.exponent_printed, 0.5, epsilon = 0.0);
        assert_eq!(r.log_factor, LogFactor::Log);
        let r = rate_exponent(2, 0.5).unwrap();
        assert_abs_diff_eq!(r.exponent_printed, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.log_factor, LogFactor::None);
        // d = 4 boundary expressed in floating point.
        let r = rate_exponent(4, 1.0 / 3.0).unwrap();
        assert_eq!(r.log_factor, LogFactor::Log);
        assert_abs_diff_eq!(r.exponent_printed, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn sigma_closed_forms() {
        // L ≡ 1, a1 = a2 = a3 = 1, no pairwise term: sigma = 1.
        let mut p = params_1d();
        p.drift = DriftSpec::LinearMeanField {
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
        };
        p.noise.l_scale = 1.0;
        let rep = compute_constants(&p, 0.5).unwrap();
        assert_abs_diff_eq!(rep.sigma, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(rep.k_bound, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(rep.sigma1_tau, 1.0, epsilon = 0.0);
        // delta = 0 degenerates: c1 = max(‖A‖ + α l(P'), (1−α) l(P)), c2 = 0.
        let mut p0 = params_1d();
        p0.delta = 0.0;
        let rep0 = compute_constants(&p0, 0.5).unwrap();
        let want_c1 = (0.3 + 0.3 * 1.0f64).max(0.7 * 1.0);
        assert_abs_diff_eq!(rep0.c1, want_c1, epsilon = 1e-15);
        assert_abs_diff_eq!(rep0.c2, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(rep0.theta_star, want_c1, epsilon = 1e-15);
    }

    #[test]
    fn sigma_and_sigma2_match_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for trial in 0..5 {
            let dim = 1 + trial % 3;
            let params = ModelParams {
                dim,
                a: AMatrix::scalar(rng.gen_range(-0.8..0.8)),
                delta: rng.gen_range(0.0..0.2),
                alpha: rng.gen_range(0.05..0.95),
                drift: DriftSpec::InteractionKernel {
                    a1: rng.gen_range(-1.0..1.0),
                    a2: rng.gen_range(-1.0..1.0),
                    a3: rng.gen_range(-1.0..1.0),
                    kappa: rng.gen_range(0.0..0.5),
                },
                noise: NoiseSpec {
                    b: rng.gen_range(0.0..0.5),
                    c_scale: rng.gen_range(0.0..0.5),
                    l_scale: rng.gen_range(0.2..1.5),
                },
                p: gauss(0.8, dim),
                pprime: gauss(0.5, dim),
            };
            let tau = rng.gen_range(0.2..2.0);
            let rep = compute_constants(&params, tau).unwrap();
            // sigma2: Monte Carlo of E (A2(z) + |B(z)|)^{1+tau} with
            // A2(z) = |c_scale| |z| and B(z) = b z.
            let n = 200_000;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let norm2: f64 = (0..dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * z
                    })
                    .sum();
                let nz = norm2.sqrt();
                samples.push(
                    ((params.noise.c_scale.abs() + params.noise.b.abs()) * nz)
                        .powf(1.0 + tau),
                );
            }
            let (mean, se) = crate::stats::mean_se(&samples);
            assert!(
                (mean - rep.sigma2_tau).abs() <= 3.0 * se,
                "trial {trial}: sigma2 MC {mean} ± {se} vs closed {}",
                rep.sigma2_tau
            );
            // sigma: empirical Lipschitz ratios of the drift approach the
            // closed form from below.
            let mut best: f64 = 0.0;
            for _ in 0..400 {
                let mk = |rng: &mut ChaCha12Rng| -> Vec<f64> {
                    (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()
                };
                let g1 = mk(&mut rng);
                let g2 = mk(&mut rng);
                let x1 = mk(&mut rng);
                let x2 = mk(&mut rng);
                let pts1: Vec<f64> = (0..3 * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let pts2: Vec<f64> = (0..3 * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mu1 = crate::transport::DiscreteMeasure::uniform(dim, pts1).unwrap();
                let mu2 = crate::transport::DiscreteMeasure::uniform(dim, pts2).unwrap();
                let eps = vec![0.0; dim];
                let f1 = crate::dynamics::drift_eval(&params.drift, &params.noise, &g1, &mu1, &x1, &eps)
                    .unwrap();
                let f2 = crate::dynamics::drift_eval(&params.drift, &params.noise, &g2, &mu2, &x2, &eps)
                    .unwrap();
                let dist = |a: &[f64], b: &[f64]| -> f64 {
                    a.iter()
                        .zip(b)
                        .map(|(&u, &v)| (u - v) * (u - v))
                        .sum::<f64>()
                        .sqrt()
                };
                let num = dist(&f1, &f2);
                let den = dist(&x1, &x2)
                    + dist(&g1, &g2)
                    + crate::transport::w1_exact_assignment(&mu1, &mu2).unwrap();
                if den > 1e-9 {
                    best = best.max(num / den);
                }
            }
            assert!(
                best <= rep.sigma + 1e-9,
                "trial {trial}: ratio {best} exceeds sigma {}",
                rep.sigma
            );
            assert!(
                best >= 0.3 * rep.sigma,
                "trial {trial}: best ratio {best} far below sigma {}",
                rep.sigma
            );
        }
    }

    #[test]
    fn std_normal_moment_formula() {
        assert_abs_diff_eq!(
            std_normal_norm_moment(1, 1.0).unwrap(),
            (2.0 / std::f64::consts::PI).sqrt(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(std_normal_norm_moment(3, 2.0).unwrap(), 3.0, epsilon = 1e-12);
        // chi distribution mean for d = 2: sqrt(pi/2).
        assert_abs_diff_eq!(
            std_normal_norm_moment(2, 1.0).unwrap(),
            (std::f64::consts::PI / 2.0).sqrt(),
            epsilon = 1e-13
        );
        // Monte Carlo cross-check for a fractional order in d = 4.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let n = 400_000;
        let p = 1.37;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let norm2: f64 = (0..4)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * z
                })
                .sum();
            samples.push(norm2.sqrt().powf(p));
        }
        let (mean, se) = crate::stats::mean_se(&samples);
        let want = std_normal_norm_moment(4, p).unwrap();
        assert!((mean - want).abs() <= 3.0 * se, "{mean} ± {se} vs {want}");
    }

    #[test]
    fn iid_constants_hand_instance() {
        // ‖A‖ = 0.2, δ = 0.05, K = 1, α = 0.1, every kernel constant 1:
        // χ = 0.3, χ₂ = max{0.3, 0.9} = 0.9, |χ − 0.9| = 0.6,
        // prefactor max{1, 0.09} = 1,
        // C₁ = 0.05·0.9/0.6 = 0.075, χ₁ = 0.9 + 0.075 = 0.975.
        // Kernel constants equal to 1 exactly: bi-exponential with
        // l∇ = 1/(2l³) = 1 at l = 2^{-1/3}; l(P) = 1 always.
        let l = 0.5f64.powf(1.0 / 3.0);
        let ker = KernelSpec::bi_exponential(l).unwrap();
        let params = ModelParams {
            dim: 1,
            a: AMatrix::scalar(0.2),
            delta: 0.05,
            alpha: 0.1,
            drift: DriftSpec::LinearMeanField {
                a1: 1.0,
                a2: 0.0,
                a3: 0.0,
            },
            noise: NoiseSpec::default(),
            p: ker,
            pprime: ker,
        };
        assert_abs_diff_eq!(params.p.constants().lip_grad, 1.0, epsilon = 1e-15);
        let (c1, chi1) = iid_constants(&params, 1.0).unwrap();
        assert_abs_diff_eq!(c1, 0.075, epsilon = 1e-12);
        assert_abs_diff_eq!(chi1, 0.975, epsilon = 1e-12);
        // delta = 0: the pair never separates, so C₁ = 0; χ₁ degenerates to
        // χ₂ = max{‖A‖, 0.9}.
        let mut p0 = params.clone();
        p0.delta = 0.0;
        assert_eq!(iid_constants(&p0, 1.0).unwrap(), (0.0, 0.9));
        // chi1 strictly increasing in delta below the resonance:
        // chi(δ) = 0.9 ⇔ δ = 0.35.
        let mut prev = 0.9;
        for i in 1..=30 {
            let mut pd = params.clone();
            pd.delta = 0.01 * i as f64;
            let (_, chi1) = iid_constants(&pd, 1.0).unwrap();
            assert!(chi1 > prev, "delta = {}: {chi1} <= {prev}", pd.delta);
            prev = chi1;
        }
        // Resonant boundary χ = c5, built from exact dyadic floats:
        // bi-exponential l = 0.5 has l∇ = 0.5/l³ = 4 exactly; with α = 0.5,
        // ‖A‖ = 0.75, δK = 0.25: χ = 0.75 + 0.25·(1+4) = 2 = max{0.5·4, 0.5·1}.
        let ker_half = KernelSpec::bi_exponential(0.5).unwrap();
        let pr = ModelParams {
            dim: 1,
            a: AMatrix::scalar(0.75),
            delta: 0.25,
            alpha: 0.5,
            drift: DriftSpec::LinearMeanField {
                a1: 1.0,
                a2: 0.0,
                a3: 0.0,
            },
            noise: NoiseSpec::default(),
            p: ker_half,
            pprime: ker_half,
        };
        let (c1r, chi1r) = iid_constants(&pr, 1.0).unwrap();
        assert!(c1r.is_infinite() && chi1r.is_infinite());
    }

    #[test]
    fn a_tau_limit_recovers_a0() {
        let rep3 = compute_constants(&params_1d(), 1e-3).unwrap();
        let lim = rep3.a_tau.powf(1.0 / (1.0 + 1e-3));
        assert!(
            (lim - rep3.a0).abs() <= 1e-2 * rep3.a0,
            "a(1e-3)^(1/(1+tau)) = {lim} vs a0 = {}",
            rep3.a0
        );
    }

    #[test]
    fn flags_are_pure_functions_of_fields() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        for _ in 0..200 {
            let dim = 1 + rng.gen_range(0..3usize);
            let params = ModelParams {
                dim,
                a: AMatrix::scalar(rng.gen_range(-0.95..0.95)),
                delta: rng.gen_range(0.0..0.5),
                alpha: rng.gen_range(0.01..0.99),
                drift: DriftSpec::LinearMeanField {
                    a1: rng.gen_range(-1.0..1.0),
                    a2: rng.gen_range(-1.0..1.0),
                    a3: rng.gen_range(-1.0..1.0),
                },
                noise: NoiseSpec {
                    b: rng.gen_range(0.0..1.0),
                    c_scale: rng.gen_range(0.0..1.0),
                    l_scale: rng.gen_range(0.1..2.0),
                },
                p: gauss(rng.gen_range(0.3..1.5), dim),
                pprime: gauss(rng.gen_range(0.3..1.5), dim),
            };
            let tau = rng.gen_range(0.1..2.5);
            let r = compute_constants(&params, tau).unwrap();
            assert_eq!(r.cond_contraction, r.c1 + r.c2 < 1.0);
            assert_eq!(r.cond_delta_a0, r.delta > 0.0 && r.delta < r.a0);
            assert_eq!(
                r.cond_delta_atau,
                r.delta > 0.0 && r.delta.powf(1.0 + r.tau) < r.a_tau
            );
            assert_eq!(r.cond_moment_tau, (1.0 - r.alpha) * r.m_tau_p < 1.0);
            // Invariants: a0 > 0 whenever ‖A‖ < 1; theta* < 1 iff contraction.
            assert!(r.a0 > 0.0);
            assert_eq!(r.theta_star < 1.0, r.cond_contraction);
            // theta* solves the defining identity when c2 > 0.
            if r.c2 > 0.0 {
                let lhs = r.c1 / r.theta_star + r.c2 / (r.theta_star * r.theta_star);
                assert!((lhs - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn alpha_star_closed_forms_and_inversion() {
        // Gaussian: h2(a) = l²a²/2 = −log(1−α).
        let p = gauss(0.8, 1);
        let a = alpha_star(&p, 0.3).unwrap();
        assert_abs_diff_eq!(a, (-2.0 * 0.7f64.ln()).sqrt() / 0.8, epsilon = 1e-14);
        // Bi-exponential: −log(1−a²l²) = −log(1−α) ⇒ a = √α / l.
        let q = KernelSpec::bi_exponential(1.3).unwrap();
        let a = alpha_star(&q, 0.4).unwrap();
        assert_abs_diff_eq!(a, 0.4f64.sqrt() / 1.3, epsilon = 1e-14);
        // Edges.
        assert_eq!(alpha_star(&p, 0.0).unwrap(), 0.0);
        assert!(alpha_star(&p, 1.0).unwrap().is_infinite());
        assert_abs_diff_eq!(alpha_star(&q, 1.0).unwrap(), 1.0 / 1.3, epsilon = 1e-14);
        // Generic inversion oracle: bisect h2 (h1(0) = 0) to the target.
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        for _ in 0..50 {
            let alpha = rng.gen_range(0.05..0.95);
            let target = -(1.0f64 - alpha).ln();
            for ker in [gauss(rng.gen_range(0.3..2.0), 1), {
                KernelSpec::bi_exponential(rng.gen_range(0.3..2.0)).unwrap()
            }] {
                let emp = ker.constants().exp_moment_params;
                let hi0 = emp.alpha1_sup();
                let (mut lo, mut hi) = (0.0, if hi0.is_finite() { hi0 * (1.0 - 1e-12) } else { 1e6 });
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if emp.h2(mid).map(|v| v < target).unwrap_or(false) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let want = alpha_star(&ker, alpha).unwrap();
                assert!(
                    (lo - want).abs() <= 1e-8 * want.max(1.0),
                    "bisection {lo} vs closed form {want}"
                );
            }
        }
    }

    #[test]
    fn moment_ceilings_cover_geometric_recursions() {
        let params = params_1d();
        // Particle ceiling at n steps equals the unrolled recursion bound.
        let rep = compute_constants(&params, 0.5).unwrap();
        let e0 = 0.4;
        let mut running = e0;
        let e_abs = std_normal_norm_moment(1, 1.0).unwrap();
        let inflow = params.delta * rep.sigma * rep.c_alpha
            + params.delta * params.noise.c_scale * e_abs
            + params.noise.b * e_abs;
        for n in 1..=40u64 {
            running = rep.gamma_moment * running + inflow;
            let ceil = particle_moment_ceiling(&params, e0, n).unwrap();
            assert_abs_diff_eq!(ceil, running, epsilon = 1e-12);
        }
        // Plateau is the n → ∞ limit.
        let far = particle_moment_ceiling(&params, e0, 2000).unwrap();
        assert!((far - rep.moment_plateau).abs() < 1e-9);
        // Field ceiling: brute-force the defining series independently.
        let mu_sup = rep.moment_plateau.max(e0);
        let eta0 = 0.9;
        let k = 7u64;
        let m1 = std_normal_norm_moment(1, 1.0).unwrap();
        let (lp, lq) = (params.p.bandwidth(), params.pprime.bandwidth());
        let mut brute = 0.0;
        for i in 0..4000u64 {
            let j_i = m1 * (lq * lq + i as f64 * lp * lp).sqrt();
            brute += params.alpha * (1.0 - params.alpha).powi(i as i32) * j_i;
        }
        let mut geo = 0.0;
        for i in 0..=k {
            geo += ((1.0 - params.alpha) * 1.0f64).powi(i as i32);
        }
        brute += params.alpha * 1.0 * mu_sup * geo
            + ((1.0 - params.alpha) * 1.0f64).powi(k as i32 + 1) * eta0;
        let ceil = field_moment_ceiling(&params, mu_sup, eta0, k).unwrap();
        assert_abs_diff_eq!(ceil, brute, epsilon = 1e-10);
    }

    #[test]
    fn field_moment_stays_below_ceiling_in_simulation() {
        use crate::dynamics::{empirical_measure, step_ips1, ParticleEnsemble};
        use crate::field::MixtureField;
        let params = params_1d();
        let rep = compute_constants(&params, 0.5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let n = 64;
        let mut ens = ParticleEnsemble::init_gaussian(1, n, &[0.0], 0.5, &mut rng).unwrap();
        let eta0_kernel = gauss(1.0, 1);
        let mut field = MixtureField::single(eta0_kernel, vec![0.0]).unwrap();
        let eta0_abs = field.first_moment().value;
        // Uniform particle-moment bound: start moment vs plateau.
        let e0 = (2.0 / std::f64::consts::PI).sqrt() * 0.5;
        let mu_sup = rep
            .moment_plateau
            .max(particle_moment_ceiling(&params, e0, 0).unwrap());
        for step in 0..40u64 {
            let (e, f) = step_ips1(&ens, &field, &params, &mut rng).unwrap();
            ens = e;
            field = f;
            let field_abs = field.first_moment().value;
            let ceil = field_moment_ceiling(&params, mu_sup, eta0_abs, step).unwrap();
            assert!(
                field_abs <= ceil,
                "step {}: field moment {field_abs} exceeds ceiling {ceil}",
                step + 1
            );
            let mu_abs = empirical_measure(&ens).first_abs_moment();
            assert!(
                mu_abs <= mu_sup + 3.0 * 1.0 / (n as f64).sqrt(),
                "step {}: particle moment {mu_abs} vs bound {mu_sup}",
                step + 1
            );
        }
    }

    #[test]
    fn report_serializes_round_trip() {
        let rep = compute_constants(&params_1d(), 0.75).unwrap();
        let json = serde_json::to_string_pretty(&rep).unwrap();
        let back: StabilityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(rep, back);
        assert!(json.contains("theta_star"));
        assert!(json.contains("closed_form"));
    }
}

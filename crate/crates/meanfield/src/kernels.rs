//! Smoothing kernel families: densities, gradients, samplers, and the
//! analytic constants consumed by the stability module.
//!
//! Both shipped families are translation invariant: `p(x, y)` depends only
//! on the offset `u = y - x`, and the transition can be realized as the
//! push-forward `y = x + (bandwidth) * Z` for a standard draw `Z`. That
//! structure gives the push-forward Lipschitz constant 1 exactly (couple two
//! starting points with common noise) and makes every constant below a
//! closed form in the bandwidth and dimension.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

/// Kernel family tag.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum KernelFamily {
    /// Isotropic Gaussian: `p(u) = (2 pi l^2)^{-d/2} exp(-|u|^2 / (2 l^2))`.
    Gaussian,
    /// Two-sided exponential (Laplace), one-dimensional only:
    /// `p(u) = exp(-|u| / l) / (2 l)`.
    BiExponential,
}

/// A Markov smoothing kernel `P(x, dy)` with bandwidth `l = bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "KernelSpecWire", into = "KernelSpecWire")]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
    dim: usize,
    /// Cached normalization constant of the density.
    norm: f64,
}

/// Serialization mirror: the cached norm is recomputed on load so the wire
/// format stays minimal and constructor validation always runs.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSpecWire {
    family: KernelFamily,
    bandwidth: f64,
    dim: usize,
}

impl TryFrom<KernelSpecWire> for KernelSpec {
    type Error = Error;
    fn try_from(w: KernelSpecWire) -> Result<Self> {
        KernelSpec::new(w.family, w.bandwidth, w.dim)
    }
}

impl From<KernelSpec> for KernelSpecWire {
    fn from(k: KernelSpec) -> Self {
        KernelSpecWire {
            family: k.family,
            bandwidth: k.bandwidth,
            dim: k.dim,
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        if dim == 0 {
            return Err(Error::invalid("kernel dimension must be at least 1"));
        }
        if family == KernelFamily::BiExponential && dim != 1 {
            return Err(Error::unsupported(
                "bi-exponential kernel is one-dimensional only",
            ));
        }
        let norm = match family {
            KernelFamily::Gaussian => {
                (2.0 * std::f64::consts::PI * bandwidth * bandwidth).powf(-(dim as f64) / 2.0)
            }
            KernelFamily::BiExponential => 0.5 / bandwidth,
        };
        Ok(Self {
            family,
            bandwidth,
            dim,
            norm,
        })
    }

    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth, dim)
    }

    pub fn bi_exponential(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::BiExponential, bandwidth, 1)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Transition density `p(x, y)`.
    pub fn density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        let r2: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let u = b - a;
                u * u
            })
            .sum();
        Ok(self.density_r2(r2))
    }

    /// Density as a function of the squared offset norm `|y - x|^2`.
    #[inline]
    pub fn density_r2(&self, r2: f64) -> f64 {
        let l = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => self.norm * (-r2 / (2.0 * l * l)).exp(),
            KernelFamily::BiExponential => self.norm * (-r2.sqrt() / l).exp(),
        }
    }

    /// Gradient `∇_y p(x, y)`.
    ///
    /// Bi-exponential at the kink `y = x` returns the zero vector (midpoint
    /// of the subdifferential), keeping drift evaluation total.
    pub fn grad_density(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        let mut g = vec![0.0; self.dim];
        self.grad_density_into(x, y, &mut g);
        Ok(g)
    }

    /// Unchecked gradient accumulation helper for hot loops. `out` receives
    /// `∇_y p(x, y)` (overwritten).
    #[inline]
    pub fn grad_density_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        let l = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => {
                let mut r2 = 0.0;
                for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
                    let u = b - a;
                    *o = u;
                    r2 += u * u;
                }
                let scale = -self.norm * (-r2 / (2.0 * l * l)).exp() / (l * l);
                for o in out.iter_mut() {
                    *o *= scale;
                }
            }
            KernelFamily::BiExponential => {
                let u = y[0] - x[0];
                out[0] = if u == 0.0 {
                    0.0
                } else {
                    -u.signum() * self.norm * (-u.abs() / l).exp() / l
                };
            }
        }
    }

    /// One-dimensional density as a function of the offset.
    #[inline]
    pub fn density1(&self, u: f64) -> f64 {
        self.density_r2(u * u)
    }

    /// One-dimensional gradient `d/dy p(x, y)` as a function of the offset.
    #[inline]
    pub fn grad1(&self, u: f64) -> f64 {
        let l = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => -self.norm * (-u * u / (2.0 * l * l)).exp() * u / (l * l),
            KernelFamily::BiExponential => {
                if u == 0.0 {
                    0.0
                } else {
                    -u.signum() * self.norm * (-u.abs() / l).exp() / l
                }
            }
        }
    }

    /// Cumulative distribution of the offset (d = 1): `F(u) = P(x, (-inf, x + u])`.
    pub fn cdf1(&self, u: f64) -> f64 {
        let l = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => normal_cdf(u / l),
            KernelFamily::BiExponential => {
                if u < 0.0 {
                    0.5 * (u / l).exp()
                } else {
                    1.0 - 0.5 * (-u / l).exp()
                }
            }
        }
    }

    /// Antiderivative of the offset CDF: `I(u) = ∫_{-inf}^{u} F(t) dt` (d = 1).
    ///
    /// Finite for both families; used for exact 1-D Wasserstein integrals
    /// between mixtures. Gaussian: `l [ (u/l) Φ(u/l) + φ(u/l) ]`;
    /// bi-exponential: `(l/2) e^{u/l}` for `u ≤ 0`, `u + (l/2) e^{-u/l}` above.
    pub fn cdf1_antideriv(&self, u: f64) -> f64 {
        let l = self.bandwidth;
        let t = u / l;
        match self.family {
            KernelFamily::Gaussian => l * (t * normal_cdf(t) + normal_pdf(t)),
            KernelFamily::BiExponential => {
                if t <= 0.0 {
                    0.5 * l * t.exp()
                } else {
                    u + 0.5 * l * (-t).exp()
                }
            }
        }
    }

    /// Draw `Y ~ P(x, ·)`.
    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut y = x.to_vec();
        self.sample_into(rng, &mut y);
        Ok(y)
    }

    /// In-place sampler: adds a kernel offset to `xy` (which holds `x` on
    /// entry and `y` on exit).
    #[inline]
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, xy: &mut [f64]) {
        debug_assert_eq!(xy.len(), self.dim);
        match self.family {
            KernelFamily::Gaussian => {
                for c in xy.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *c += self.bandwidth * z;
                }
            }
            KernelFamily::BiExponential => {
                xy[0] += self.bandwidth * sample_std_laplace(rng);
            }
        }
    }

    /// Analytic constants, cached by value (cheap copies).
    pub fn constants(&self) -> KernelConstants {
        KernelConstants::of(*self)
    }

    /// `E[e^{a1 |Y|}]` for `Y ~ P(x, ·)`, one-dimensional, closed form.
    ///
    /// Gaussian (any `a1 >= 0`), with `m = |x|`:
    /// `e^{a1^2 l^2 / 2} [ e^{a1 m} Φ(m/l + a1 l) + e^{-a1 m} Φ(a1 l - m/l) ]`.
    /// Bi-exponential (needs `a1 l < 1`):
    /// `e^{a1 m}/(2(1 - a1 l)) + e^{-m/l}/(2(1 - a1 l))
    ///  + e^{a1 m}(1 - e^{-m(a1 + 1/l)})/(2(1 + a1 l))`.
    pub fn exp_moment(&self, x: f64, alpha1: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::unsupported("exp_moment is one-dimensional"));
        }
        if !(alpha1.is_finite() && alpha1 >= 0.0) {
            return Err(Error::invalid(format!(
                "alpha1 must be finite and nonnegative, got {alpha1}"
            )));
        }
        let l = self.bandwidth;
        let m = x.abs();
        match self.family {
            KernelFamily::Gaussian => {
                let a = alpha1;
                Ok((a * a * l * l / 2.0).exp()
                    * ((a * m).exp() * normal_cdf(m / l + a * l)
                        + (-a * m).exp() * normal_cdf(a * l - m / l)))
            }
            KernelFamily::BiExponential => {
                let al = alpha1 * l;
                if al >= 1.0 {
                    return Err(Error::Diverged {
                        step: 0,
                        what: format!(
                            "exponential moment diverges: alpha1 * bandwidth = {al} >= 1"
                        ),
                    });
                }
                let e_am = (alpha1 * m).exp();
                Ok(e_am / (2.0 * (1.0 - al))
                    + (-m / l).exp() / (2.0 * (1.0 - al))
                    + e_am * (1.0 - (-m * (alpha1 + 1.0 / l)).exp()) / (2.0 * (1.0 + al)))
            }
        }
    }

    /// Raw absolute moment of the kernel offset: `E |l Z|^{1+tau}`.
    ///
    /// Gaussian in `R^d`: `l^{1+tau} 2^{(1+tau)/2} Γ((d+1+tau)/2) / Γ(d/2)`;
    /// bi-exponential: `l^{1+tau} Γ(2+tau)`.
    pub fn abs_moment_1ptau(&self, tau: f64) -> Result<f64> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::invalid(format!(
                "tau must be finite and nonnegative, got {tau}"
            )));
        }
        let p = 1.0 + tau;
        let l = self.bandwidth;
        Ok(match self.family {
            KernelFamily::Gaussian => {
                let d = self.dim as f64;
                l.powf(p)
                    * (p / 2.0 * std::f64::consts::LN_2 + ln_gamma((d + p) / 2.0)
                        - ln_gamma(d / 2.0))
                    .exp()
            }
            KernelFamily::BiExponential => l.powf(p) * ln_gamma(2.0 + tau).exp(),
        })
    }

    /// Mean absolute offset `E |l Z|` (the `tau = 0` case).
    pub fn first_abs_moment(&self) -> f64 {
        self.abs_moment_1ptau(0.0).expect("tau = 0 is in domain")
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse-CDF draw from the standard Laplace distribution (unit scale).
#[inline]
pub fn sample_std_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>();
    if u < 0.5 {
        (2.0 * u).max(f64::MIN_POSITIVE).ln()
    } else {
        -(2.0 * (1.0 - u)).max(f64::MIN_POSITIVE).ln()
    }
}

/// Exponential-moment bound parameters: the comparison functions
/// `h1, h2, h3` with `E[e^{a1 |Y|} | Y ~ P(x,·)] <= e^{a1 h1(|x|) + h2(a1) + h3(a1)|x|}`
/// shape used by the exponential-regime analysis. For both shipped families
/// `h1(x) = x` (slope 1, `h1(0) = 0`) and `h3 ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpMomentParams {
    pub h1_slope: f64,
    pub h1_at_zero: f64,
    family: KernelFamily,
    bandwidth: f64,
}

impl ExpMomentParams {
    /// Largest admissible `a1` (exclusive): infinite for Gaussian,
    /// `1 / bandwidth` for bi-exponential.
    pub fn alpha1_sup(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => f64::INFINITY,
            KernelFamily::BiExponential => 1.0 / self.bandwidth,
        }
    }

    /// `h2(a1)`: Gaussian `l^2 a1^2 / 2`; bi-exponential
    /// `log(1 / (1 - a1^2 l^2))` (an upper bound compatible with the
    /// corrected closed-form moment, valid for `a1 l < 1`).
    pub fn h2(&self, alpha1: f64) -> Result<f64> {
        if alpha1 < 0.0 {
            return Err(Error::invalid("alpha1 must be nonnegative"));
        }
        let l = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => Ok(l * l * alpha1 * alpha1 / 2.0),
            KernelFamily::BiExponential => {
                let al = alpha1 * l;
                if al >= 1.0 {
                    return Err(Error::Diverged {
                        step: 0,
                        what: format!("h2 diverges: alpha1 * bandwidth = {al} >= 1"),
                    });
                }
                Ok(-(1.0 - al * al).ln())
            }
        }
    }

    /// `h3(a1)`: identically zero for the shipped families.
    pub fn h3(&self, _alpha1: f64) -> f64 {
        0.0
    }
}

/// Analytic constants of a kernel, computed once at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    /// Wasserstein-1 Lipschitz constant of `mu -> mu P`. Both families are
    /// push-forwards `x -> x + l Z`, so this is exactly 1.
    pub lip_pushforward: f64,
    /// Lipschitz constant of `y -> ∇_y p(x, y)` on its smooth range:
    /// the supremum of the density Hessian norm. Gaussian:
    /// `(2 pi l^2)^{-d/2} / l^2` (attained at the center); bi-exponential:
    /// `1 / (2 l^3)` (the smooth-branch constant; across the kink the
    /// gradient jumps and the zero-vector convention applies at the kink
    /// itself).
    pub lip_grad: f64,
    /// Linear-growth constant for the gradient: `|∇_y p(x, y)| <= grad_growth
    /// * (1 + |y - x|)`. The gradient is in fact bounded, so the bounded
    /// supremum itself is a valid (and the reported) constant.
    pub grad_growth: f64,
    /// `sup_x |∇_y p(x, y)|_{y fixed}` = the supremum of the gradient norm
    /// over offsets: Gaussian `(2 pi l^2)^{-d/2} e^{-1/2} / l`;
    /// bi-exponential `1 / (2 l^2)`. This is the additive offset entering the
    /// linear gradient-growth bound for evolved fields.
    pub grad_at_zero: f64,
    /// Exponential-moment comparison parameters.
    pub exp_moment_params: ExpMomentParams,
    spec: KernelSpec,
}

impl KernelConstants {
    fn of(spec: KernelSpec) -> Self {
        let l = spec.bandwidth;
        let (lip_grad, grad_sup) = match spec.family {
            KernelFamily::Gaussian => {
                let peak = spec.norm; // (2 pi l^2)^{-d/2}
                (peak / (l * l), peak * (-0.5f64).exp() / l)
            }
            KernelFamily::BiExponential => (0.5 / (l * l * l), 0.5 / (l * l)),
        };
        Self {
            lip_pushforward: 1.0,
            lip_grad,
            grad_growth: grad_sup,
            grad_at_zero: grad_sup,
            exp_moment_params: ExpMomentParams {
                h1_slope: 1.0,
                h1_at_zero: 0.0,
                family: spec.family,
                bandwidth: l,
            },
            spec,
        }
    }

    /// Sup-ratio moment constant `m_tau(P) = sup_x E|Y|^{1+tau} / (1 +
    /// |x|^{1+tau})`, reported as the standard split upper bound
    /// `2^tau * max(1, E|l Z|^{1+tau})` (conservative, finite for all tau).
    pub fn moment_1ptau(&self, tau: f64) -> Result<f64> {
        let raw = self.spec.abs_moment_1ptau(tau)?;
        Ok(2f64.powf(tau) * raw.max(1.0))
    }

    pub fn kernel(&self) -> KernelSpec {
        self.spec
    }
}

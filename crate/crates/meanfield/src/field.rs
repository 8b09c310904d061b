//! The chemical concentration field as an exact finite kernel mixture.
//!
//! A field is `η(y) = Σ_i w_i k_i(c_i, y)`. Two evolution rules are
//! provided: the exact update
//! `η⁺ = (1−α)(η ∗ P) + α Σ_j m_j P′(x_j, ·)` (component count grows by the
//! number of atoms), and the bounded-memory sampled update that replaces
//! `η ∗ P` by `M` kernel components seeded at i.i.d. draws from `η`. A
//! closed-form geometric expansion of the exact update over a whole history
//! serves as the oracle for the one-step rule.

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::quad::adaptive_simpson;
use crate::transport::{DiscreteMeasure, Sampleable};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Components below this weight are dropped (weights renormalized).
pub const WEIGHT_FLOOR: f64 = 1e-15;

/// One weighted kernel component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub center: Vec<f64>,
    pub kernel: KernelSpec,
}

/// A normalized finite kernel mixture on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureField {
    dim: usize,
    components: Vec<Component>,
}

impl MixtureField {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("field dimension must be at least 1"));
        }
        if components.is_empty() {
            return Err(Error::invalid("field needs at least one component"));
        }
        for (i, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::invalid(format!(
                    "component {i}: weight must be finite and nonnegative"
                )));
            }
            if c.center.len() != dim || c.center.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {i}: center must be finite with dim {dim}"
                )));
            }
            if c.kernel.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.kernel.dim(),
                });
            }
        }
        let total = kahan_sum(components.iter().map(|c| c.weight));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "component weights must sum to 1 within 1e-12, got {total}"
            )));
        }
        Ok(Self { dim, components })
    }

    /// Single-component field: the kernel placed at `center` with weight 1.
    pub fn single(kernel: KernelSpec, center: Vec<f64>) -> Result<Self> {
        let dim = kernel.dim();
        Self::new(
            dim,
            vec![Component {
                weight: 1.0,
                center,
                kernel,
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// `η(y) = Σ w_i k_i(c_i, y)`.
    pub fn eval_density(&self, y: &[f64]) -> Result<f64> {
        self.check_point(y)?;
        let mut acc = 0.0;
        for c in &self.components {
            let r2: f64 = c
                .center
                .iter()
                .zip(y)
                .map(|(a, b)| {
                    let u = b - a;
                    u * u
                })
                .sum();
            acc += c.weight * c.kernel.density_r2(r2);
        }
        Ok(acc)
    }

    /// `∇η(y)`; this is the gradient fed to the drift.
    pub fn eval_gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_point(y)?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.eval_gradient_into(y, &mut out, &mut scratch);
        Ok(out)
    }

    /// Allocation-free gradient for hot loops; `out` is overwritten,
    /// `scratch` is a caller-provided buffer of length `dim`.
    pub fn eval_gradient_into(&self, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in &self.components {
            c.kernel.grad_density_into(&c.center, y, scratch);
            for (o, &g) in out.iter_mut().zip(scratch.iter()) {
                *o += c.weight * g;
            }
        }
    }

    /// Scalar fast paths for one-dimensional simulation loops.
    pub fn eval_gradient1(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight * c.kernel.grad1(y - c.center[0]);
        }
        acc
    }

    pub fn eval_density1(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight * c.kernel.density1(y - c.center[0]);
        }
        acc
    }

    /// Mixture CDF at `x` (d = 1).
    pub fn cdf1(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight * c.kernel.cdf1(x - c.center[0]);
        }
        acc
    }

    /// `∫_{-inf}^{x} F(t) dt` in closed form (d = 1).
    pub fn cdf1_antideriv(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight * c.kernel.cdf1_antideriv(x - c.center[0]);
        }
        acc
    }

    /// Mixture mean (kernels are symmetric, so this is the weighted center).
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mc, &cc) in m.iter_mut().zip(&c.center) {
                *mc += c.weight * cc;
            }
        }
        m
    }

    /// Interval essentially supporting the mixture (d = 1): all component
    /// tails beyond it are below ~1e-18 of mass.
    pub fn support_window(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            let pad = match c.kernel.family() {
                KernelFamily::Gaussian => 10.0 * c.kernel.bandwidth(),
                KernelFamily::BiExponential => 42.0 * c.kernel.bandwidth(),
            };
            lo = lo.min(c.center[0] - pad);
            hi = hi.max(c.center[0] + pad);
        }
        (lo, hi)
    }

    /// Keep `m` components chosen by categorical resampling on the weights
    /// (unbiased for the mixture density); duplicates are merged. Fields
    /// already within budget are returned unchanged.
    pub fn compact<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<MixtureField> {
        if m == 0 {
            return Err(Error::invalid("compaction budget must be positive"));
        }
        if self.components.len() <= m {
            return Ok(self.clone());
        }
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for _ in 0..m {
            let idx = self.pick_component(rng.gen());
            *counts.entry(idx).or_insert(0) += 1;
        }
        self.from_counts(&counts, m)
    }

    /// Deterministic systematic resampling to `m` components: components are
    /// ordered by (family, bandwidth, center) and selected at the weight
    /// quantile levels `(j + 0.5)/m`. Bitwise reproducible; unchanged when
    /// already within budget.
    ///
    /// The ordering is kernel-major on purpose: components sharing a kernel
    /// (e.g. one generation of an evolved field) occupy a contiguous weight
    /// band, so each selection stratum resolves positions within a single
    /// kernel layer instead of collapsing unlike bandwidths stacked at the
    /// same center. This keeps the compaction error — and its step-to-step
    /// churn under repeated evolve/compact cycles — at the scale of the
    /// within-layer center spacing.
    pub fn compact_stratified(&self, m: usize) -> Result<MixtureField> {
        if m == 0 {
            return Err(Error::invalid("compaction budget must be positive"));
        }
        if self.components.len() <= m {
            return Ok(self.clone());
        }
        let mut order: Vec<usize> = (0..self.components.len()).collect();
        order.sort_by(|&a, &b| {
            let ca = &self.components[a];
            let cb = &self.components[b];
            let key = ca
                .kernel
                .family()
                .cmp(&cb.kernel.family())
                .then(ca.kernel.bandwidth().total_cmp(&cb.kernel.bandwidth()));
            if key != std::cmp::Ordering::Equal {
                return key;
            }
            for (xa, xb) in ca.center.iter().zip(&cb.center) {
                match xa.total_cmp(xb) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            a.cmp(&b)
        });
        let cum: Vec<f64> = order
            .iter()
            .scan(0.0, |acc, &i| {
                *acc += self.components[i].weight;
                Some(*acc)
            })
            .collect();
        let total = *cum.last().expect("nonempty");
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        let mut pos = 0usize;
        for j in 0..m {
            let target = total * (j as f64 + 0.5) / m as f64;
            while pos + 1 < cum.len() && cum[pos] < target {
                pos += 1;
            }
            *counts.entry(order[pos]).or_insert(0) += 1;
        }
        self.from_counts(&counts, m)
    }

    fn from_counts(
        &self,
        counts: &std::collections::BTreeMap<usize, usize>,
        m: usize,
    ) -> Result<MixtureField> {
        let comps: Vec<Component> = counts
            .iter()
            .map(|(&i, &k)| Component {
                weight: k as f64 / m as f64,
                center: self.components[i].center.clone(),
                kernel: self.components[i].kernel,
            })
            .collect();
        MixtureField::new(self.dim, comps)
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }

    /// `⟨|x|, η⟩` with the evaluation method recorded.
    pub fn first_moment(&self) -> MomentEstimate {
        self.abs_moment(0.0)
    }

    /// `⟨|x|^{1+τ}, η⟩`.
    pub fn moment_1ptau(&self, tau: f64) -> MomentEstimate {
        self.abs_moment(tau)
    }

    fn abs_moment(&self, tau: f64) -> MomentEstimate {
        debug_assert!(tau >= 0.0);
        // τ = 1 is the mixture second moment: closed form in any dimension.
        if (tau - 1.0).abs() < 1e-14 {
            let mut v = 0.0;
            for c in &self.components {
                let c2: f64 = c.center.iter().map(|x| x * x).sum();
                let l = c.kernel.bandwidth();
                let kern_var = match c.kernel.family() {
                    KernelFamily::Gaussian => self.dim as f64 * l * l,
                    KernelFamily::BiExponential => 2.0 * l * l,
                };
                v += c.weight * (c2 + kern_var);
            }
            return MomentEstimate::exact(v, "closed-form");
        }
        match self.dim {
            1 => {
                if tau == 0.0 {
                    // Folded means are closed-form for both families.
                    let mut v = 0.0;
                    for c in &self.components {
                        let l = c.kernel.bandwidth();
                        let m = c.center[0];
                        v += c.weight
                            * match c.kernel.family() {
                                KernelFamily::Gaussian => folded_normal_mean(m, l),
                                KernelFamily::BiExponential => laplace_abs_mean(m, l),
                            };
                    }
                    MomentEstimate::exact(v, "closed-form")
                } else {
                    let mut v = 0.0;
                    for c in &self.components {
                        v += c.weight * abs_moment_1d(c, tau);
                    }
                    MomentEstimate::exact(v, "quadrature")
                }
            }
            2 => {
                let mut v = 0.0;
                for c in &self.components {
                    v += c.weight * abs_moment_2d_gaussian(c, tau);
                }
                MomentEstimate::exact(v, "quadrature")
            }
            _ => self.abs_moment_mc(tau),
        }
    }

    fn abs_moment_mc(&self, tau: f64) -> MomentEstimate {
        use rand::SeedableRng;
        // Deterministic internal stream: moments are reporting quantities
        // and must not perturb caller rng state.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x4d4f4d_u64);
        let n = 200_000usize;
        let mut buf = vec![0.0; self.dim];
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let idx = self.pick_component(rng.gen());
            buf.copy_from_slice(&self.components[idx].center);
            self.components[idx].kernel.sample_into(&mut rng, &mut buf);
            let r = buf.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = r.powf(1.0 + tau);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        MomentEstimate {
            value: mean,
            std_error: (var / n as f64).sqrt(),
            method: "monte-carlo",
        }
    }

    /// Documented JSON layout:
    /// `{dim, components: [{w, center: [...], family, bandwidth}]}`.
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&FieldJson::from(self))?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let fj: FieldJson = serde_json::from_str(s)?;
        fj.try_into()
    }
}

impl Sampleable for MixtureField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let idx = self.pick_component(rng.gen());
        out.copy_from_slice(&self.components[idx].center);
        self.components[idx].kernel.sample_into(rng, out);
    }
}

fn kahan_sum(it: impl Iterator<Item = f64>) -> f64 {
    let (mut total, mut comp) = (0.0f64, 0.0f64);
    for w in it {
        let y = w - comp;
        let t = total + y;
        comp = (t - total) - y;
        total = t;
    }
    total
}

/// `E|m + l Z|` for standard normal `Z` (folded normal mean).
pub fn folded_normal_mean(m: f64, l: f64) -> f64 {
    let a = m.abs();
    if l <= 0.0 {
        return a;
    }
    let t = a / l;
    a * (2.0 * crate::kernels::normal_cdf(t) - 1.0)
        + l * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * t * t).exp()
}

/// `E|m + l W|` for standard Laplace `W`.
pub fn laplace_abs_mean(m: f64, l: f64) -> f64 {
    let a = m.abs();
    if l <= 0.0 {
        return a;
    }
    a + l * (-a / l).exp()
}

/// `E|c + L|^{1+τ}` for one component via adaptive quadrature split at the
/// |x| kink.
fn abs_moment_1d(c: &Component, tau: f64) -> f64 {
    let l = c.kernel.bandwidth();
    let m = c.center[0];
    let reach = match c.kernel.family() {
        KernelFamily::Gaussian => 12.0 * l,
        KernelFamily::BiExponential => 60.0 * l,
    };
    let (lo, hi) = (m - reach, m + reach);
    let g = |x: f64| x.abs().powf(1.0 + tau) * c.kernel.density1(x - m);
    let tol = 1e-11 * (1.0 + m.abs() + l).powf(1.0 + tau);
    if lo < 0.0 && hi > 0.0 {
        adaptive_simpson(&g, lo, 0.0, tol) + adaptive_simpson(&g, 0.0, hi, tol)
    } else {
        adaptive_simpson(&g, lo, hi, tol)
    }
}

/// `E‖c + l Z‖^{1+τ}` for a 2-D Gaussian component: rotate so the center is
/// `(r, 0)` and integrate the smooth radial integrand with nested adaptive
/// Simpson over the standardized noise.
fn abs_moment_2d_gaussian(c: &Component, tau: f64) -> f64 {
    let l = c.kernel.bandwidth();
    let r = c.center.iter().map(|x| x * x).sum::<f64>().sqrt();
    let p = 0.5 * (1.0 + tau);
    let phi = |z: f64| (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let outer = |z1: f64| {
        let a = r + l * z1;
        let inner = |z2: f64| {
            let q = a * a + l * l * z2 * z2;
            q.powf(p) * phi(z2)
        };
        // even in z2
        2.0 * adaptive_simpson(&inner, 0.0, 9.0, 1e-11 * (1.0 + r + l).powf(1.0 + tau))
            * phi(z1)
    };
    adaptive_simpson(&outer, -9.0, 9.0, 1e-9 * (1.0 + r + l).powf(1.0 + tau))
}

/// A moment value with its provenance; `std_error` is 0 for closed-form and
/// quadrature paths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: &'static str,
}

impl MomentEstimate {
    fn exact(value: f64, method: &'static str) -> Self {
        Self {
            value,
            std_error: 0.0,
            method,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    w: f64,
    center: Vec<f64>,
    family: KernelFamily,
    bandwidth: f64,
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    dim: usize,
    components: Vec<ComponentJson>,
}

impl From<&MixtureField> for FieldJson {
    fn from(f: &MixtureField) -> Self {
        FieldJson {
            dim: f.dim,
            components: f
                .components
                .iter()
                .map(|c| ComponentJson {
                    w: c.weight,
                    center: c.center.clone(),
                    family: c.kernel.family(),
                    bandwidth: c.kernel.bandwidth(),
                })
                .collect(),
        }
    }
}

impl TryFrom<FieldJson> for MixtureField {
    type Error = Error;

    fn try_from(fj: FieldJson) -> Result<Self> {
        let comps = fj
            .components
            .into_iter()
            .map(|c| {
                Ok(Component {
                    weight: c.w,
                    center: c.center,
                    kernel: KernelSpec::new(c.family, c.bandwidth, fj.dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureField::new(fj.dim, comps)
    }
}

/// `M` i.i.d. points drawn from a field, tagged with the step they were
/// drawn at (0 when the caller has no step context).
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub dim: usize,
    pub points: Vec<f64>,
    pub source_step: u64,
}

impl FieldSample {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Exact field update
/// `η⁺ = (1−α)(η ∗ P) + α Σ_j m_j P′(x_j, ·)`.
///
/// The convolution step is exact for Gaussian components under a Gaussian
/// `P` (bandwidths add in quadrature); any other combination with positive
/// `(1−α)` weight is an unsupported-combination error. Component count grows
/// by the atom count of `mu`.
pub fn evolve_exact(
    f: &MixtureField,
    mu: &DiscreteMeasure,
    alpha: f64,
    p: &KernelSpec,
    pprime: &KernelSpec,
) -> Result<MixtureField> {
    check_evolution_dims(f.dim(), mu, alpha, p, pprime)?;
    let mut comps = Vec::with_capacity(f.len() + mu.len());
    if alpha < 1.0 {
        let lp = p.bandwidth();
        if p.family() != KernelFamily::Gaussian {
            return Err(Error::unsupported(
                "exact convolution requires a Gaussian diffusion kernel",
            ));
        }
        for c in f.components() {
            if c.kernel.family() != KernelFamily::Gaussian {
                return Err(Error::unsupported(
                    "exact convolution requires Gaussian field components",
                ));
            }
            let lc = c.kernel.bandwidth();
            comps.push(Component {
                weight: (1.0 - alpha) * c.weight,
                center: c.center.clone(),
                kernel: KernelSpec::gaussian((lc * lc + lp * lp).sqrt(), f.dim())?,
            });
        }
    }
    if alpha > 0.0 {
        for (x, &w) in mu.iter_points().zip(mu.weights()) {
            comps.push(Component {
                weight: alpha * w,
                center: x.to_vec(),
                kernel: *pprime,
            });
        }
    }
    finalize(f.dim(), comps)
}

/// `M` i.i.d. draws from the field (categorical over weights, then a kernel
/// draw from the chosen component).
pub fn subsample<R: Rng + ?Sized>(f: &MixtureField, m: usize, rng: &mut R) -> Result<FieldSample> {
    if m == 0 {
        return Err(Error::invalid("subsample size must be positive"));
    }
    let d = f.dim();
    let mut points = vec![0.0; m * d];
    for i in 0..m {
        f.sample_point(rng, &mut points[i * d..(i + 1) * d]);
    }
    Ok(FieldSample {
        dim: d,
        points,
        source_step: 0,
    })
}

/// Bounded-memory field update
/// `η̄⁺ = (1−α) (S^M(η̄) ∗ P) + α Σ_j m_j P′(x_j, ·)`:
/// exactly `M` P-components at the sampled points plus `N` P′-components at
/// the atoms (zero-weight groups dropped when `α` is 0 or 1).
pub fn evolve_sampled(
    s: &FieldSample,
    mu: &DiscreteMeasure,
    alpha: f64,
    p: &KernelSpec,
    pprime: &KernelSpec,
) -> Result<MixtureField> {
    check_evolution_dims(s.dim, mu, alpha, p, pprime)?;
    let m = s.len();
    if m == 0 {
        return Err(Error::invalid("field sample must be nonempty"));
    }
    let mut comps = Vec::with_capacity(m + mu.len());
    if alpha < 1.0 {
        for i in 0..m {
            comps.push(Component {
                weight: (1.0 - alpha) / m as f64,
                center: s.point(i).to_vec(),
                kernel: *p,
            });
        }
    }
    if alpha > 0.0 {
        for (x, &w) in mu.iter_points().zip(mu.weights()) {
            comps.push(Component {
                weight: alpha * w,
                center: x.to_vec(),
                kernel: *pprime,
            });
        }
    }
    finalize(s.dim, comps)
}

/// Closed-form geometric expansion of `k+1` exact updates:
/// `η_{k+1} = Σ_{i=0}^{k} α(1−α)^i μ_{k−i} P′ P^i + (1−α)^{k+1} η₀ P^{k+1}`,
/// with `P′ P^i` realized as bandwidth `√(λ′² + i λ_P²)` in the Gaussian
/// case. `mus` is the history `μ₀ … μ_k`. Oracle for [`evolve_exact`].
pub fn expansion_reference(
    eta0: &MixtureField,
    mus: &[DiscreteMeasure],
    alpha: f64,
    p: &KernelSpec,
    pprime: &KernelSpec,
) -> Result<MixtureField> {
    if mus.is_empty() {
        return Err(Error::invalid("expansion needs at least one measure"));
    }
    let d = eta0.dim();
    for mu in mus {
        check_evolution_dims(d, mu, alpha, p, pprime)?;
    }
    let k = mus.len() - 1;
    let mut comps = Vec::new();
    let lp = p.bandwidth();
    let lq = pprime.bandwidth();
    for i in 0..=k {
        let coeff = alpha * (1.0 - alpha).powi(i as i32);
        if coeff == 0.0 {
            continue;
        }
        let kernel = if i == 0 {
            *pprime
        } else {
            if pprime.family() != KernelFamily::Gaussian || p.family() != KernelFamily::Gaussian {
                return Err(Error::unsupported(
                    "expansion terms with repeated convolution require Gaussian kernels",
                ));
            }
            KernelSpec::gaussian((lq * lq + i as f64 * lp * lp).sqrt(), d)?
        };
        let mu = &mus[k - i];
        for (x, &w) in mu.iter_points().zip(mu.weights()) {
            comps.push(Component {
                weight: coeff * w,
                center: x.to_vec(),
                kernel,
            });
        }
    }
    let tail_coeff = (1.0 - alpha).powi(k as i32 + 1);
    if tail_coeff > 0.0 {
        if p.family() != KernelFamily::Gaussian {
            return Err(Error::unsupported(
                "expansion tail requires a Gaussian diffusion kernel",
            ));
        }
        for c in eta0.components() {
            if c.kernel.family() != KernelFamily::Gaussian {
                return Err(Error::unsupported(
                    "expansion tail requires Gaussian initial components",
                ));
            }
            let lc = c.kernel.bandwidth();
            comps.push(Component {
                weight: tail_coeff * c.weight,
                center: c.center.clone(),
                kernel: KernelSpec::gaussian(
                    (lc * lc + (k as f64 + 1.0) * lp * lp).sqrt(),
                    d,
                )?,
            });
        }
    }
    finalize(d, comps)
}

fn check_evolution_dims(
    d: usize,
    mu: &DiscreteMeasure,
    alpha: f64,
    p: &KernelSpec,
    pprime: &KernelSpec,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
        });
    }
    if p.dim() != d || pprime.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if p.dim() != d { p.dim() } else { pprime.dim() },
        });
    }
    Ok(())
}

/// Apply the weight floor and renormalize exactly.
fn finalize(dim: usize, mut comps: Vec<Component>) -> Result<MixtureField> {
    comps.retain(|c| c.weight >= WEIGHT_FLOOR);
    if comps.is_empty() {
        return Err(Error::invalid("all components fell below the weight floor"));
    }
    let total = kahan_sum(comps.iter().map(|c| c.weight));
    for c in &mut comps {
        c.weight /= total;
    }
    MixtureField::new(dim, comps)
}

/// Exact `W1` between two one-dimensional mixtures by adaptive integration
/// of `|F_a - F_b|` over their joint support window.
pub fn w1_mixture_1d(a: &MixtureField, b: &MixtureField, tol: f64) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::unsupported("mixture W1 integral requires dim 1"));
    }
    let (la, ha) = a.support_window();
    let (lb, hb) = b.support_window();
    let (lo, hi) = (la.min(lb), ha.max(hb));
    let g = |x: f64| (a.cdf1(x) - b.cdf1(x)).abs();
    // Split at a few interior points so widely separated lumps are not
    // missed by the first Simpson refinement.
    let pieces = 8;
    let mut acc = 0.0;
    for i in 0..pieces {
        let x0 = lo + (hi - lo) * i as f64 / pieces as f64;
        let x1 = lo + (hi - lo) * (i + 1) as f64 / pieces as f64;
        acc += adaptive_simpson(&g, x0, x1, tol / pieces as f64);
    }
    Ok(acc)
}

/// Fast fixed-grid trapezoid variant of [`w1_mixture_1d`] for
/// experiment-scale distance sweeps.
pub fn w1_mixture_grid_1d(a: &MixtureField, b: &MixtureField, probes: usize) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::unsupported("mixture W1 integral requires dim 1"));
    }
    if probes < 8 {
        return Err(Error::invalid("need at least 8 probes"));
    }
    let (la, ha) = a.support_window();
    let (lb, hb) = b.support_window();
    let (lo, hi) = (la.min(lb), ha.max(hb));
    let h = (hi - lo) / probes as f64;
    let g = |x: f64| (a.cdf1(x) - b.cdf1(x)).abs();
    let mut acc = 0.5 * (g(lo) + g(hi));
    for i in 1..probes {
        acc += g(lo + h * i as f64);
    }
    Ok(acc * h)
}

/// Exact `W1` between a one-dimensional mixture and a discrete measure:
/// outer tails in closed form via the CDF antiderivative, interior segments
/// between consecutive atoms by adaptive quadrature.
pub fn w1_mixture_vs_discrete_1d(
    f: &MixtureField,
    m: &DiscreteMeasure,
    tol: f64,
) -> Result<f64> {
    if f.dim() != 1 || m.dim() != 1 {
        return Err(Error::unsupported("mixture W1 integral requires dim 1"));
    }
    let mut atoms: Vec<(f64, f64)> = m
        .iter_points()
        .map(|p| p[0])
        .zip(m.weights().iter().copied())
        .collect();
    atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let x_first = atoms[0].0;
    let x_last = atoms[atoms.len() - 1].0;
    // Left of the first atom F_m = 0; right of the last F_m = 1.
    let mut acc = f.cdf1_antideriv(x_first);
    let mean_f = f.mean()[0];
    acc += mean_f - x_last + f.cdf1_antideriv(x_last);
    let mut fm = 0.0;
    let n_seg = atoms.len();
    let seg_tol = tol / n_seg.max(1) as f64;
    for s in 0..n_seg {
        fm += atoms[s].1;
        if s + 1 == n_seg {
            break;
        }
        let (x0, x1) = (atoms[s].0, atoms[s + 1].0);
        if x1 <= x0 {
            continue;
        }
        let fm_here = fm;
        let g = |x: f64| (f.cdf1(x) - fm_here).abs();
        acc += adaptive_simpson(&g, x0, x1, seg_tol);
    }
    Ok(acc)
}

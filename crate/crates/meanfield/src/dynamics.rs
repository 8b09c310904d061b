//! Particle evolution: the exact-field interacting system (IPS₁), the
//! bounded-memory sampled-field system (IPS₂), and the auxiliary i.i.d.
//! system driven by the limit flow with shared noise.
//!
//! One particle step is
//! `Xᵢ⁺ = A Xᵢ + δ f(∇η(Xᵢ), μ, Xᵢ, εᵢ) + B(εᵢ)`,
//! with the field updated afterwards from the PRE-move empirical measure.
//! Noise is derived statelessly per (base, particle stream, step), which
//! makes trajectories independent of evaluation order and lets the primary
//! and auxiliary systems consume identical draws.

use crate::error::{Error, Result};
use crate::field::{evolve_exact, evolve_sampled, subsample, MixtureField};
use crate::kernels::KernelSpec;
use crate::rng::{mix, FIELD_STREAM};
use crate::transport::DiscreteMeasure;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// The linear part `A` of the particle update, with a scalar-multiple
/// fast path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AMatrix {
    Scalar { a: f64 },
    Full { rows: Vec<Vec<f64>> },
}

impl AMatrix {
    pub fn scalar(a: f64) -> Self {
        AMatrix::Scalar { a }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            AMatrix::Scalar { a } => {
                if !a.is_finite() {
                    return Err(Error::invalid("A scalar must be finite"));
                }
            }
            AMatrix::Full { rows } => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::invalid(format!("A must be {dim}x{dim}")));
                }
                if rows.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::invalid("A entries must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            AMatrix::Scalar { a } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = a * xi;
                }
            }
            AMatrix::Full { rows } => {
                for (o, row) in out.iter_mut().zip(rows) {
                    *o = row.iter().zip(x).map(|(&r, &xi)| r * xi).sum();
                }
            }
        }
    }

    /// Spectral norm. Scalar path is exact; the general path runs power
    /// iteration on `AᵀA` to tolerance 1e-10.
    pub fn operator_norm(&self, dim: usize) -> f64 {
        match self {
            AMatrix::Scalar { a } => a.abs(),
            AMatrix::Full { rows } => {
                let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
                let mut av = vec![0.0; dim];
                let mut atav = vec![0.0; dim];
                let mut lambda = 0.0f64;
                for _ in 0..10_000 {
                    // av = A v
                    for (o, row) in av.iter_mut().zip(rows) {
                        *o = row.iter().zip(&v).map(|(&r, &x)| r * x).sum();
                    }
                    // atav = Aᵀ av
                    for o in atav.iter_mut() {
                        *o = 0.0;
                    }
                    for (row, &a) in rows.iter().zip(&av) {
                        for (o, &r) in atav.iter_mut().zip(row) {
                            *o += r * a;
                        }
                    }
                    let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return 0.0;
                    }
                    let new_lambda = norm;
                    for (vi, &t) in v.iter_mut().zip(&atav) {
                        *vi = t / norm;
                    }
                    if (new_lambda - lambda).abs() <= 1e-10 * new_lambda.max(1.0) {
                        lambda = new_lambda;
                        break;
                    }
                    lambda = new_lambda;
                }
                lambda.sqrt()
            }
        }
    }
}

/// Drift family with analytically known Lipschitz data.
///
/// `LinearMeanField`:
/// `f(g, μ, x, ε) = L(ε)(a1 g + a2 mean(μ) + a3 x) + c(ε)`.
/// `InteractionKernel` adds the pairwise term
/// `(1/N) Σ_j κ tanh(X_j − x)` (componentwise), which is κ-Lipschitz in
/// both `x` and `μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DriftSpec {
    LinearMeanField { a1: f64, a2: f64, a3: f64 },
    InteractionKernel { a1: f64, a2: f64, a3: f64, kappa: f64 },
}

impl DriftSpec {
    pub fn coeffs(&self) -> (f64, f64, f64, f64) {
        match *self {
            DriftSpec::LinearMeanField { a1, a2, a3 } => (a1, a2, a3, 0.0),
            DriftSpec::InteractionKernel { a1, a2, a3, kappa } => (a1, a2, a3, kappa),
        }
    }

    /// The Lipschitz bound `A₁(ε) = |L(ε)| max(|a1|,|a2|,|a3|) + κ` of the
    /// joint (gradient, measure, position) contraction inequality.
    pub fn lipschitz_bound(&self, l_scale: f64) -> f64 {
        let (a1, a2, a3, kappa) = self.coeffs();
        l_scale.abs() * a1.abs().max(a2.abs()).max(a3.abs()) + kappa.abs()
    }

    pub fn validate(&self) -> Result<()> {
        let (a1, a2, a3, kappa) = self.coeffs();
        for (name, v) in [("a1", a1), ("a2", a2), ("a3", a3), ("kappa", kappa)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("drift coefficient {name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Noise model: `ε ~ N(0, I_d)` with `B(ε) = b ε`, `c(ε) = c_scale ε`, and
/// constant `L(ε) = l_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub b: f64,
    pub c_scale: f64,
    pub l_scale: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            b: 1.0,
            c_scale: 0.0,
            l_scale: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if ![self.b, self.c_scale, self.l_scale]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("noise parameters must be finite"));
        }
        Ok(())
    }
}

/// Full model parameterization of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dim: usize,
    pub a: AMatrix,
    pub delta: f64,
    pub alpha: f64,
    pub drift: DriftSpec,
    pub noise: NoiseSpec,
    pub p: KernelSpec,
    pub pprime: KernelSpec,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        self.a.validate(self.dim)?;
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::invalid("delta must be finite and nonnegative"));
        }
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        self.drift.validate()?;
        self.noise.validate()?;
        if self.p.dim() != self.dim || self.pprime.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: if self.p.dim() != self.dim {
                    self.p.dim()
                } else {
                    self.pprime.dim()
                },
            });
        }
        Ok(())
    }

    pub fn operator_norm_a(&self) -> f64 {
        self.a.operator_norm(self.dim)
    }
}

/// Positions of the `N` particles at a step, each with a persistent noise
/// stream id so permutation and coupling arguments are testable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    step: u64,
    stream_ids: Vec<u64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::invalid("positions must be a nonempty multiple of dim"));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("positions must be finite"));
        }
        let n = positions.len() / dim;
        Ok(Self {
            dim,
            positions,
            step: 0,
            stream_ids: (0..n as u64).collect(),
        })
    }

    /// `N` i.i.d. Gaussian starts `N(mean, sd² I)`.
    pub fn init_gaussian<R: Rng + ?Sized>(
        dim: usize,
        n: usize,
        mean: &[f64],
        sd: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if mean.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: mean.len(),
            });
        }
        let mut positions = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                positions.push(m + sd * z);
            }
        }
        Self::new(dim, positions)
    }

    /// All `N` particles at the same point.
    pub fn init_point(dim: usize, n: usize, point: &[f64]) -> Result<Self> {
        if point.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: point.len(),
            });
        }
        let mut positions = Vec::with_capacity(n * dim);
        for _ in 0..n {
            positions.extend_from_slice(point);
        }
        Self::new(dim, positions)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn stream_ids(&self) -> &[u64] {
        &self.stream_ids
    }

    /// Permute particles and their noise streams in tandem.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[p] = true;
        }
        let mut positions = Vec::with_capacity(self.positions.len());
        let mut stream_ids = Vec::with_capacity(n);
        for &p in perm {
            positions.extend_from_slice(self.position(p));
            stream_ids.push(self.stream_ids[p]);
        }
        Ok(Self {
            dim: self.dim,
            positions,
            step: self.step,
            stream_ids,
        })
    }
}

/// Zero-copy-in-spirit empirical view: `1/N` at every particle position.
pub fn empirical_measure(ens: &ParticleEnsemble) -> DiscreteMeasure {
    DiscreteMeasure::uniform(ens.dim, ens.positions.clone()).expect("ensemble invariants")
}

/// The drift `f(g, μ, x, ε)`; `L(ε)` and `c(ε)` come from the noise spec.
pub fn drift_eval(
    spec: &DriftSpec,
    noise: &NoiseSpec,
    g: &[f64],
    mu: &DiscreteMeasure,
    x: &[f64],
    eps: &[f64],
) -> Result<Vec<f64>> {
    let d = x.len();
    if g.len() != d || eps.len() != d || mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if g.len() != d {
                g.len()
            } else if eps.len() != d {
                eps.len()
            } else {
                mu.dim()
            },
        });
    }
    let mean = mu.mean();
    let mut out = vec![0.0; d];
    drift_eval_into(spec, noise, g, &mean, mu, x, eps, &mut out);
    Ok(out)
}

/// Hot-loop variant with the measure mean precomputed.
#[allow(clippy::too_many_arguments)]
fn drift_eval_into(
    spec: &DriftSpec,
    noise: &NoiseSpec,
    g: &[f64],
    mu_mean: &[f64],
    mu: &DiscreteMeasure,
    x: &[f64],
    eps: &[f64],
    out: &mut [f64],
) {
    let (a1, a2, a3, kappa) = spec.coeffs();
    for c in 0..x.len() {
        let mut v = noise.l_scale * (a1 * g[c] + a2 * mu_mean[c] + a3 * x[c])
            + noise.c_scale * eps[c];
        if kappa != 0.0 {
            let mut inter = 0.0;
            for p in mu.iter_points() {
                inter += (p[c] - x[c]).tanh();
            }
            v += kappa * inter / mu.len() as f64;
        }
        out[c] = v;
    }
}

/// Fill `out` with the standard normal draw assigned to
/// (noise base, particle stream, step): stateless, order-independent.
fn noise_draw(base: u64, stream: u64, step: u64, out: &mut [f64]) {
    let mut rng = ChaCha12Rng::seed_from_u64(mix(mix(base, stream), step));
    for o in out.iter_mut() {
        *o = rng.sample(StandardNormal);
    }
}

struct StepScratch {
    eps: Vec<f64>,
    grad: Vec<f64>,
    ax: Vec<f64>,
    drift: Vec<f64>,
    kscratch: Vec<f64>,
}

impl StepScratch {
    fn new(d: usize) -> Self {
        StepScratch {
            eps: vec![0.0; d],
            grad: vec![0.0; d],
            ax: vec![0.0; d],
            drift: vec![0.0; d],
            kscratch: vec![0.0; d],
        }
    }
}

/// Move every particle one step against `field` and `mu`, writing new
/// positions into `next`.
#[allow(clippy::too_many_arguments)]
fn advance_particles(
    ens: &ParticleEnsemble,
    field: &MixtureField,
    mu: &DiscreteMeasure,
    params: &ModelParams,
    noise_base: u64,
    next: &mut Vec<f64>,
    scratch: &mut StepScratch,
) -> Result<()> {
    let d = ens.dim;
    let mu_mean = mu.mean();
    next.clear();
    next.reserve(ens.positions.len());
    for i in 0..ens.len() {
        let x = ens.position(i);
        noise_draw(noise_base, ens.stream_ids[i], ens.step, &mut scratch.eps);
        field.eval_gradient_into(x, &mut scratch.grad, &mut scratch.kscratch);
        params.a.apply_into(x, &mut scratch.ax);
        drift_eval_into(
            &params.drift,
            &params.noise,
            &scratch.grad,
            &mu_mean,
            mu,
            x,
            &scratch.eps,
            &mut scratch.drift,
        );
        for c in 0..d {
            let v =
                scratch.ax[c] + params.delta * scratch.drift[c] + params.noise.b * scratch.eps[c];
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: ens.step + 1,
                    what: format!("particle {i} coordinate {c}"),
                });
            }
            next.push(v);
        }
    }
    Ok(())
}

/// One IPS₁ step: exact field evolution with the PRE-move empirical measure.
pub fn step_ips1(
    ens: &ParticleEnsemble,
    field: &MixtureField,
    params: &ModelParams,
    rng: &mut ChaCha12Rng,
) -> Result<(ParticleEnsemble, MixtureField)> {
    check_step_dims(ens, field, params)?;
    let noise_base = rng.next_u64();
    let mu = empirical_measure(ens);
    let mut scratch = StepScratch::new(ens.dim);
    let mut next = Vec::new();
    advance_particles(ens, field, &mu, params, noise_base, &mut next, &mut scratch)?;
    let new_field = evolve_exact(field, &mu, params.alpha, &params.p, &params.pprime)?;
    Ok((
        ParticleEnsemble {
            dim: ens.dim,
            positions: next,
            step: ens.step + 1,
            stream_ids: ens.stream_ids.clone(),
        },
        new_field,
    ))
}

/// One IPS₂ step: particles read the sampled field's gradient; the field is
/// rebuilt from an `M`-point subsample plus the `N` pre-move particles, so
/// its component count stays at `M + N`.
pub fn step_ips2(
    ens: &ParticleEnsemble,
    field: &MixtureField,
    m: usize,
    params: &ModelParams,
    rng: &mut ChaCha12Rng,
) -> Result<(ParticleEnsemble, MixtureField)> {
    check_step_dims(ens, field, params)?;
    let noise_base = rng.next_u64();
    let mu = empirical_measure(ens);
    let mut scratch = StepScratch::new(ens.dim);
    let mut next = Vec::new();
    advance_particles(ens, field, &mu, params, noise_base, &mut next, &mut scratch)?;
    let mut field_rng = ChaCha12Rng::seed_from_u64(mix(mix(noise_base, FIELD_STREAM), ens.step));
    let mut sample = subsample(field, m, &mut field_rng)?;
    sample.source_step = ens.step;
    let new_field = evolve_sampled(&sample, &mu, params.alpha, &params.p, &params.pprime)?;
    Ok((
        ParticleEnsemble {
            dim: ens.dim,
            positions: next,
            step: ens.step + 1,
            stream_ids: ens.stream_ids.clone(),
        },
        new_field,
    ))
}

/// Interacting X-system coupled to an auxiliary i.i.d. Y-system driven by
/// the limit flow; both consume identical noise draws per (particle, step).
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub primary: ParticleEnsemble,
    pub auxiliary: ParticleEnsemble,
}

impl CoupledState {
    /// Start the coupling: `Y₀ = X₀`.
    pub fn start(x0: ParticleEnsemble) -> Self {
        CoupledState {
            auxiliary: x0.clone(),
            primary: x0,
        }
    }

    pub fn step(&self) -> u64 {
        self.primary.step
    }
}

/// One time slice `(μ_n, η_n)` of the limit flow, used to drive the
/// auxiliary system.
#[derive(Debug, Clone)]
pub struct LimitSnapshot<'a> {
    pub step: u64,
    pub mu: &'a DiscreteMeasure,
    pub eta: &'a MixtureField,
}

/// Advance the coupled pair one step. X follows the interacting IPS₁ rule
/// with `field_n`; Y follows the limit-driven rule built from `snap`
/// (which must carry the same step index); both use the same `εᵢ`.
/// Returns the new state together with the evolved interacting field.
pub fn step_coupled(
    cs: &CoupledState,
    field_n: &MixtureField,
    snap: &LimitSnapshot<'_>,
    params: &ModelParams,
    rng: &mut ChaCha12Rng,
) -> Result<(CoupledState, MixtureField)> {
    if cs.primary.step != cs.auxiliary.step
        || cs.primary.len() != cs.auxiliary.len()
        || cs.primary.stream_ids != cs.auxiliary.stream_ids
    {
        return Err(Error::invalid("coupled ensembles out of sync"));
    }
    if snap.step != cs.primary.step {
        return Err(Error::invalid(format!(
            "limit snapshot at step {} but coupled state at step {}",
            snap.step,
            cs.primary.step
        )));
    }
    check_step_dims(&cs.primary, field_n, params)?;
    if snap.mu.dim() != params.dim || snap.eta.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            got: snap.mu.dim(),
        });
    }
    let noise_base = rng.next_u64();
    let mu_n = empirical_measure(&cs.primary);
    let mut scratch = StepScratch::new(params.dim);
    let mut next_x = Vec::new();
    advance_particles(
        &cs.primary,
        field_n,
        &mu_n,
        params,
        noise_base,
        &mut next_x,
        &mut scratch,
    )?;
    let mut next_y = Vec::new();
    advance_particles(
        &cs.auxiliary,
        snap.eta,
        snap.mu,
        params,
        noise_base,
        &mut next_y,
        &mut scratch,
    )?;
    let new_field = evolve_exact(field_n, &mu_n, params.alpha, &params.p, &params.pprime)?;
    let step = cs.primary.step + 1;
    Ok((
        CoupledState {
            primary: ParticleEnsemble {
                dim: params.dim,
                positions: next_x,
                step,
                stream_ids: cs.primary.stream_ids.clone(),
            },
            auxiliary: ParticleEnsemble {
                dim: params.dim,
                positions: next_y,
                step,
                stream_ids: cs.auxiliary.stream_ids.clone(),
            },
        },
        new_field,
    ))
}

fn check_step_dims(
    ens: &ParticleEnsemble,
    field: &MixtureField,
    params: &ModelParams,
) -> Result<()> {
    params.validate()?;
    if ens.dim != params.dim || field.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            got: if ens.dim != params.dim {
                ens.dim
            } else {
                field.dim()
            },
        });
    }
    Ok(())
}

/// Append ensemble rows `step,particle,coord0..coordD-1` to a CSV writer.
pub fn write_positions_csv<W: std::io::Write>(
    wtr: &mut csv::Writer<W>,
    ens: &ParticleEnsemble,
) -> Result<()> {
    for i in 0..ens.len() {
        let mut rec = Vec::with_capacity(2 + ens.dim);
        rec.push(ens.step.to_string());
        rec.push(i.to_string());
        for c in ens.position(i) {
            rec.push(format!("{c:.17e}"));
        }
        wtr.write_record(&rec)?;
    }
    Ok(())
}

//! Small quadrature toolbox: Gauss–Hermite rules and adaptive Simpson.

use nalgebra::DMatrix;

/// A Gauss–Hermite rule for the weight `exp(-t^2)` on the real line.
///
/// Nodes/weights come from the Golub–Welsch eigendecomposition of the
/// symmetric Jacobi matrix (off-diagonal `sqrt(k/2)`), so
/// `sum_j w_j g(t_j) ≈ ∫ g(t) exp(-t^2) dt`, exact for polynomials of
/// degree `2n-1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        if order == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![std::f64::consts::PI.sqrt()],
            };
        }
        let n = order;
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jac[(k - 1, k)] = b;
            jac[(k, k - 1)] = b;
        }
        let eig = jac.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let node = eig.eigenvalues[j];
                let v0 = eig.eigenvectors[(0, j)];
                let w = std::f64::consts::PI.sqrt() * v0 * v0;
                (node, w)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize: the rule is symmetric about 0, eigen-solvers are not.
        let m = n / 2;
        for j in 0..m {
            let k = n - 1 - j;
            let node = 0.5 * (pairs[k].0 - pairs[j].0);
            let w = 0.5 * (pairs[j].1 + pairs[k].1);
            pairs[j] = (-node, w);
            pairs[k] = (node, w);
        }
        if n % 2 == 1 {
            pairs[m].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Expectation `E[g(Z)]` for `Z ~ N(0,1)`: substitute `z = sqrt(2) t`.
    pub fn normal_expect(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * g(std::f64::consts::SQRT_2 * t);
        }
        acc * inv_sqrt_pi
    }

    /// Standard-normal nodes (`sqrt(2) t_j`) and probability weights
    /// (`w_j / sqrt(pi)`, summing to 1).
    pub fn normal_rule(&self) -> (Vec<f64>, Vec<f64>) {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        (
            self.nodes.iter().map(|t| std::f64::consts::SQRT_2 * t).collect(),
            self.weights.iter().map(|w| w * inv_sqrt_pi).collect(),
        )
    }
}

/// Adaptive Simpson integration of `f` on `[a, b]` to absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

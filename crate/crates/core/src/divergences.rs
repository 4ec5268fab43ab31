//! KL and Rényi divergences between diagonal Gaussians.
//!
//! The canonical Rényi definition here integrates `p(z)^a q(z)^(1-a)`:
//!
//! ```text
//! D_a(q || p) = 1/(a-1) * log ∫ p(z)^a q(z)^(1-a) dz      (ArgumentOrder::Reverse)
//! ```
//!
//! which equals the textbook `D_a(p || q)`. [`ArgumentOrder::Standard`]
//! switches to the textbook integrand `q^a p^(1-a)`. Both reduce to the same
//! closed form: for `f1 = N(m1, v1)`, `f2 = N(m2, v2)` and the textbook
//! `D_a(f1 || f2)`,
//!
//! ```text
//! v*  = a v2 + (1-a) v1
//! D_a = ln(s2/s1) + ln(v2/v*) / (2(a-1)) + a (m1-m2)^2 / (2 v*)
//! ```
//!
//! defined only while `v* > 0`. At `a = 1` the KL divergence `KL(f1 || f2)`
//! is returned instead.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};

/// Value substituted for an undefined divergence inside optimization loops.
pub const UNDEFINED_PENALTY: f64 = 1e12;

/// Which density carries the exponent `alpha` in the Rényi integrand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArgumentOrder {
    /// `∫ p^a q^(1-a)`; the alpha = 1 branch is `KL(p || q)`.
    #[default]
    Reverse,
    /// `∫ q^a p^(1-a)`; the alpha = 1 branch is `KL(q || p)`.
    Standard,
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != var.len() {
            return Err(Error::ShapeMismatch(format!(
                "Gaussian with {} means and {} variances",
                mean.len(),
                var.len()
            )));
        }
        if let Some(&bad) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidVariance(bad));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFiniteActivation("Gaussian mean".into()));
        }
        Ok(Self { mean, var })
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        assert!(d >= 1);
        Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }
}

/// Per-dimension weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityWeights(Vec<f64>);

impl StabilityWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `w_i = var_i / sum_j var_j`: dimensions where the prior is uncertain are
/// constrained less.
pub fn stability_weights(prior: &DiagGaussian) -> StabilityWeights {
    let total: f64 = prior.var.iter().sum();
    StabilityWeights(prior.var.iter().map(|v| v / total).collect())
}

fn check_var(v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidVariance(v))
    }
}

/// `KL(q || p)` for one-dimensional Gaussians.
pub fn kl_1d(q_mean: f64, q_var: f64, p_mean: f64, p_var: f64) -> Result<f64> {
    check_var(q_var)?;
    check_var(p_var)?;
    let d = q_mean - p_mean;
    Ok(0.5 * (p_var / q_var).ln() + (q_var + d * d) / (2.0 * p_var) - 0.5)
}

/// Maps `(q, p)` to the `(f1, f2)` pair of the textbook `D_a(f1 || f2)`.
fn oriented(
    q: (f64, f64),
    p: (f64, f64),
    order: ArgumentOrder,
) -> ((f64, f64), (f64, f64)) {
    match order {
        ArgumentOrder::Reverse => (p, q),
        ArgumentOrder::Standard => (q, p),
    }
}

/// Mixed variance `v*`; the divergence exists iff it is positive.
fn mixed_var(v1: f64, v2: f64, alpha: f64) -> f64 {
    alpha * v2 + (1.0 - alpha) * v1
}

/// Integrability of `p^a q^(1-a)`: `a/p_var + (1-a)/q_var > 0`.
pub fn renyi_validity(q_var: f64, p_var: f64, alpha: f64) -> bool {
    renyi_validity_ordered(q_var, p_var, alpha, ArgumentOrder::Reverse)
}

pub fn renyi_validity_ordered(q_var: f64, p_var: f64, alpha: f64, order: ArgumentOrder) -> bool {
    let (v1, v2) = match order {
        ArgumentOrder::Reverse => (p_var, q_var),
        ArgumentOrder::Standard => (q_var, p_var),
    };
    // a/v1 + (1-a)/v2 > 0  <=>  a v2 + (1-a) v1 > 0 for positive variances
    alpha / v1 + (1.0 - alpha) / v2 > 0.0 && mixed_var(v1, v2, alpha) > 0.0
}

/// Closed-form Rényi divergence of order `alpha` between 1-D Gaussians.
pub fn renyi_1d(
    q_mean: f64,
    q_var: f64,
    p_mean: f64,
    p_var: f64,
    alpha: f64,
    order: ArgumentOrder,
) -> Result<f64> {
    check_var(q_var)?;
    check_var(p_var)?;
    let ((m1, v1), (m2, v2)) = oriented((q_mean, q_var), (p_mean, p_var), order);
    if alpha == 1.0 {
        return kl_1d(m1, v1, m2, v2);
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("Renyi order must be positive and finite, got {alpha}")));
    }
    let vs = mixed_var(v1, v2, alpha);
    if !(vs > 0.0) {
        return Err(Error::RenyiUndefined { alpha, dim: 0 });
    }
    let d = m1 - m2;
    let value = 0.5 * (v2 / v1).ln() + (v2 / vs).ln() / (2.0 * (alpha - 1.0)) + alpha * d * d / (2.0 * vs);
    // Tiny negative values are rounding around zero.
    Ok(value.max(0.0))
}

fn log_normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    let d = z - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// Composite Simpson integral of `f1^a f2^(1-a)` over `[-halfwidth, halfwidth]`
/// with no validity or boundary checks. `points` is rounded up to an odd count.
pub fn renyi_integrand_integral(
    f1: (f64, f64),
    f2: (f64, f64),
    alpha: f64,
    halfwidth: f64,
    points: usize,
) -> f64 {
    renyi_log_integral(f1, f2, alpha, halfwidth, points).exp()
}

fn log_integrand(z: f64, f1: (f64, f64), f2: (f64, f64), alpha: f64) -> f64 {
    alpha * log_normal_pdf(z, f1.0, f1.1) + (1.0 - alpha) * log_normal_pdf(z, f2.0, f2.1)
}

/// Natural log of [`renyi_integrand_integral`], accumulated with log-sum-exp so
/// integrals beyond the `f64` range stay finite.
pub fn renyi_log_integral(f1: (f64, f64), f2: (f64, f64), alpha: f64, halfwidth: f64, points: usize) -> f64 {
    let n = if points.is_multiple_of(2) { points + 1 } else { points.max(3) };
    let h = 2.0 * halfwidth / (n - 1) as f64;
    let weighted: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w.ln() + log_integrand(-halfwidth + i as f64 * h, f1, f2, alpha)
        })
        .collect();
    let top = weighted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + weighted.iter().map(|l| (l - top).exp()).sum::<f64>().ln() + (h / 3.0).ln()
}

/// Rényi divergence by direct numerical integration of the defining integral.
///
/// `q` and `p` are `(mean, var)` pairs. Independent of [`renyi_1d`]; used to
/// verify it.
pub fn renyi_quadrature_oracle(
    q: (f64, f64),
    p: (f64, f64),
    alpha: f64,
    grid_halfwidth: f64,
    grid_points: usize,
    order: ArgumentOrder,
) -> Result<f64> {
    check_var(q.1)?;
    check_var(p.1)?;
    for (m, v) in [q, p] {
        let reach = m.abs() + 10.0 * v.sqrt();
        if reach > grid_halfwidth {
            return Err(Error::GridTooNarrow(reach - grid_halfwidth));
        }
    }
    let (f1, f2) = oriented(q, p, order);
    if alpha == 1.0 {
        // KL(f1 || f2) = ∫ f1 (ln f1 - ln f2)
        let n = if grid_points.is_multiple_of(2) { grid_points + 1 } else { grid_points };
        let h = 2.0 * grid_halfwidth / (n - 1) as f64;
        let g = |z: f64| {
            let l1 = log_normal_pdf(z, f1.0, f1.1);
            l1.exp() * (l1 - log_normal_pdf(z, f2.0, f2.1))
        };
        let mut acc = g(-grid_halfwidth) + g(grid_halfwidth);
        for i in 1..n - 1 {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(-grid_halfwidth + i as f64 * h);
        }
        return Ok(acc * h / 3.0);
    }
    let log_integral = renyi_log_integral(f1, f2, alpha, grid_halfwidth, grid_points);
    // Crude tail estimate: endpoint density spread over one halfwidth, relative to the total.
    let edges = [-grid_halfwidth, grid_halfwidth].map(|z| log_integrand(z, f1, f2, alpha));
    let top = edges[0].max(edges[1]);
    let log_edge = top + edges.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    let boundary = (log_edge + grid_halfwidth.ln() - log_integral).exp();
    if !(boundary <= 1e-12) {
        return Err(Error::GridTooNarrow(boundary));
    }
    Ok(log_integral / (alpha - 1.0))
}

/// `lambda * sum_i w_i D_a(q_i || p_i)` with `w = stability_weights(p)`.
pub fn weighted_stability(
    q: &DiagGaussian,
    p: &DiagGaussian,
    lambda: f64,
    alpha: f64,
    order: ArgumentOrder,
) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::ShapeMismatch(format!("posterior d={} vs prior d={}", q.dim(), p.dim())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("stability weight must be >= 0, got {lambda}")));
    }
    let w = stability_weights(p);
    let mut total = 0.0;
    for i in 0..q.dim() {
        let d = renyi_1d(q.mean[i], q.var[i], p.mean[i], p.var[i], alpha, order).map_err(|e| match e {
            Error::RenyiUndefined { alpha, .. } => Error::RenyiUndefined { alpha, dim: i },
            other => other,
        })?;
        total += w.0[i] * d;
    }
    Ok(lambda * total)
}

/// Graph output of [`weighted_stability_graph`].
pub struct StabilityNode {
    /// Differentiable surrogate; equals the true value whenever every dimension is valid.
    pub value: Var,
    /// Dimensions where the divergence is undefined at the current posterior.
    pub undefined_dims: Vec<usize>,
}

/// Differentiable weighted stability term for a `1 x d` posterior `(q_mean, q_var)`
/// against a fixed prior.
///
/// Where `v*` falls below a small positive floor `tau` it is clamped to
/// `tau` and a linear barrier `(tau - v*) / tau` is added, so values and
/// gradients stay finite and the gradient pushes `v*` back into the valid
/// region. Callers report [`UNDEFINED_PENALTY`] for such iterates.
pub fn weighted_stability_graph(
    g: &mut Graph,
    q_mean: Var,
    q_var: Var,
    prior: &DiagGaussian,
    lambda: f64,
    alpha: f64,
    order: ArgumentOrder,
) -> StabilityNode {
    let w = stability_weights(prior);
    let p_mean = g.constant_row(prior.mean.clone());
    let p_var = g.constant_row(prior.var.clone());
    let ((m1, v1), (m2, v2)) = match order {
        ArgumentOrder::Reverse => ((p_mean, p_var), (q_mean, q_var)),
        ArgumentOrder::Standard => ((q_mean, q_var), (p_mean, p_var)),
    };
    let diff = g.sub(m1, m2);
    let diff_sq = g.square(diff);
    let ln_v1 = g.ln(v1);
    let ln_v2 = g.ln(v2);
    let ln_ratio = g.sub(ln_v2, ln_v1);
    let half_ln_ratio = g.scale(ln_ratio, 0.5);

    let mut undefined_dims = Vec::new();
    let per_dim = if alpha == 1.0 {
        // KL(f1 || f2) = ½ ln(v2/v1) + (v1 + Δ²)/(2 v2) − ½
        let num = g.add(v1, diff_sq);
        let frac = g.div(num, v2);
        let half = g.scale(frac, 0.5);
        let s = g.add(half_ln_ratio, half);
        g.offset(s, -0.5)
    } else {
        let a_v2 = g.scale(v2, alpha);
        let b_v1 = g.scale(v1, 1.0 - alpha);
        let vs_raw = g.add(a_v2, b_v1);
        for (i, &vs) in g.value(vs_raw).data().iter().enumerate() {
            if !(vs > 0.0) {
                undefined_dims.push(i);
            }
        }
        let min_prior = prior.var.iter().copied().fold(f64::INFINITY, f64::min);
        let tau = 1e-3 * min_prior;
        let vs = g.clamp(vs_raw, tau, f64::INFINITY);
        let shortfall = g.offset(vs_raw, -tau);
        let shortfall = g.scale(shortfall, -1.0 / tau);
        let barrier = g.relu(shortfall);
        let ln_vs = g.ln(vs);
        let log_term = g.sub(ln_v2, ln_vs);
        let log_term = g.scale(log_term, 1.0 / (2.0 * (alpha - 1.0)));
        let quad = g.div(diff_sq, vs);
        let quad = g.scale(quad, alpha / 2.0);
        let s = g.add(half_ln_ratio, log_term);
        let s = g.add(s, quad);
        g.add(s, barrier)
    };
    let wv = g.constant_row(w.0);
    let weighted = g.mul(per_dim, wv);
    let total = g.sum(weighted);
    StabilityNode {
        value: g.scale(total, lambda),
        undefined_dims,
    }
}

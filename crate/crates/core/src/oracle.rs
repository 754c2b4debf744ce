//! Brute-force ground truth used to check every estimator and gradient:
//! exact expectations by enumeration, central finite differences, exact KL,
//! total variation and a chi-squared frequency test.
//!
//! Nothing here calls into the estimators it is used to verify.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::{SampleSpace, SpaceElement};

/// Project-wide finite-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// A probability table over an explicit support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDistribution<T> {
    support: Vec<T>,
    probs: Vec<f64>,
}

impl<T: PartialEq + Clone> FiniteDistribution<T> {
    pub fn new(support: Vec<T>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), got: probs.len() });
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::NotADistribution(format!("invalid probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::NotADistribution(format!("probabilities sum to {total}")));
        }
        for i in 0..support.len() {
            if support[..i].contains(&support[i]) {
                return Err(Error::SupportMismatch(format!("support element {i} is repeated")));
            }
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[T] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `other`'s probabilities reordered to follow `self`'s support.
    fn aligned(&self, other: &Self) -> Result<Vec<f64>> {
        if self.support.len() != other.support.len() {
            return Err(Error::SupportMismatch(format!("{} vs {} support points", self.support.len(), other.support.len())));
        }
        if self.support == other.support {
            return Ok(other.probs.clone());
        }
        self.support
            .iter()
            .map(|x| {
                other.support.iter().position(|y| y == x).map(|j| other.probs[j]).ok_or_else(|| Error::SupportMismatch("support sets differ".into()))
            })
            .collect()
    }
}

impl FiniteDistribution<usize> {
    /// Support `0..probs.len()`.
    pub fn indexed(probs: Vec<f64>) -> Result<Self> {
        Self::new((0..probs.len()).collect(), probs)
    }
}

/// KL divergence that keeps an infinite value visible instead of overflowing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum KlValue {
    Finite(f64),
    Infinite,
}

impl KlValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            Self::Infinite => None,
        }
    }
}

/// `Σ p log(p/q)`; `Infinite` when `p` puts mass where `q` has none.
pub fn exact_kl<T: PartialEq + Clone>(p: &FiniteDistribution<T>, q: &FiniteDistribution<T>) -> Result<KlValue> {
    let q_probs = p.aligned(q)?;
    let mut total = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q_probs) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Ok(KlValue::Infinite);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(KlValue::Finite(total.max(0.0)))
}

/// `½ Σ |p − q|`.
pub fn tv_distance<T: PartialEq + Clone>(p: &FiniteDistribution<T>, q: &FiniteDistribution<T>) -> Result<f64> {
    let q_probs = p.aligned(q)?;
    Ok(0.5 * p.probs.iter().zip(&q_probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// TV distance between two probability vectors on a shared index set.
pub fn tv_distance_vec(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTest {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub critical_value: f64,
    pub significance: f64,
    pub passed: bool,
}

/// Pearson chi-squared goodness of fit of observed `counts` to `expected_probs`.
/// Cells with zero expected probability must have zero counts.
pub fn frequency_test(counts: &[usize], expected_probs: &[f64], significance: f64) -> Result<FrequencyTest> {
    if counts.len() != expected_probs.len() {
        return Err(Error::SupportMismatch(format!("{} count cells vs {} probabilities", counts.len(), expected_probs.len())));
    }
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::InvalidArgument(format!("significance {significance} not in (0, 1)")));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let mut statistic = 0.0;
    let mut cells = 0usize;
    for (c, p) in counts.iter().zip(expected_probs) {
        let expected = p * n as f64;
        if expected == 0.0 {
            if *c > 0 {
                return Ok(FrequencyTest { statistic: f64::INFINITY, degrees_of_freedom: 0, critical_value: f64::NAN, significance, passed: false });
            }
            continue;
        }
        statistic += (*c as f64 - expected).powi(2) / expected;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let critical_value = chi.inverse_cdf(1.0 - significance);
    Ok(FrequencyTest { statistic, degrees_of_freedom: dof, critical_value, significance, passed: statistic <= critical_value })
}

/// Counts of each index in `samples` (indices must be `< bins`).
pub fn histogram(samples: impl IntoIterator<Item = usize>, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for s in samples {
        counts[s] += 1;
    }
    counts
}

/// Central differences `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut point = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let up = f(&point);
        point[i] = orig - eps;
        let down = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective not finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Fixed-step projected gradient descent over the simplex.
pub fn simplex_minimize<G>(grad: G, start: &[f64], step: f64, iterations: usize) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut x = project_simplex(start);
    for _ in 0..iterations {
        let g = grad(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simplex gradient".into()));
        }
        let moved: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        x = project_simplex(&moved);
    }
    Ok(x)
}

/// `Σ_x w̄(x) h(x)` with `w̄ ∝ exp(log_weight(x))`, enumerating `space`.
pub fn brute_expectation<X, W, H>(space: &SampleSpace, cap: u64, log_weight: W, h: H) -> Result<Vec<f64>>
where
    X: SpaceElement,
    W: Fn(&X) -> f64,
    H: Fn(&X) -> Vec<f64>,
{
    let elems = X::enumerate_space(space, cap)?;
    brute_expectation_over(&elems, log_weight, h)
}

/// As [`brute_expectation`] over an explicit element list.
pub fn brute_expectation_over<X, W, H>(elems: &[X], log_weight: W, h: H) -> Result<Vec<f64>>
where
    W: Fn(&X) -> f64,
    H: Fn(&X) -> Vec<f64>,
{
    let log_w: Vec<f64> = elems.iter().map(&log_weight).collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights("no element has finite positive weight".into()));
    }
    let mut norm = 0.0;
    let mut acc: Vec<f64> = Vec::new();
    for (x, lw) in elems.iter().zip(&log_w) {
        let w = (lw - max).exp();
        if w == 0.0 {
            continue;
        }
        let hx = h(x);
        if acc.is_empty() {
            acc = vec![0.0; hx.len()];
        } else if acc.len() != hx.len() {
            return Err(Error::DimensionMismatch { expected: acc.len(), got: hx.len() });
        }
        for (a, v) in acc.iter_mut().zip(&hx) {
            *a += w * v;
        }
        norm += w;
    }
    Ok(acc.into_iter().map(|a| a / norm).collect())
}

/// `log Σ_x exp(log_weight(x))` by enumeration.
pub fn brute_log_partition<X, W>(elems: &[X], log_weight: W) -> f64
where
    W: Fn(&X) -> f64,
{
    let log_w: Vec<f64> = elems.iter().map(log_weight).collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + log_w.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

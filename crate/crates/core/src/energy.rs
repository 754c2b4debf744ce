//! The regularized distribution `q(x) ∝ p_θ(x) exp(α f_φ(x, s))`.
//!
//! Exact quantities come from enumeration in the log domain. Sampled ones use
//! draws from `p_θ` reweighted by `exp(α f)`; draws are split by a
//! [`ChunkPlan`] and every chunk keeps its own max-shift, rescaled when chunks
//! are merged in order.

use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintModel;
use crate::error::{Error, Result};
use crate::model::{ExplicitModel, GenerativeModel, SpaceElement};
use crate::numeric::log_sum_exp;
use crate::rng::{ChunkPlan, StreamFamily};

/// ESS fraction below which a warning is logged.
pub const ESS_WARN_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ISEstimate {
    pub value: f64,
    pub stderr: f64,
    pub ess: f64,
    pub n: usize,
}

/// Componentwise self-normalized estimate sharing one set of weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ISVectorEstimate {
    pub values: Vec<f64>,
    /// `Ẑ` from the same draws.
    pub z_hat: f64,
    /// `log Ẑ`, finite even when `z_hat` under- or overflows.
    pub log_z_hat: f64,
    pub ess: f64,
    pub n: usize,
}

/// Where the normalizer of a self-normalized estimate comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// The same draws as the numerator.
    #[default]
    Shared,
    /// A second, independent batch of draws.
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsOptions {
    pub plan: ChunkPlan,
    pub normalizer: Normalizer,
}

/// `q` over an enumerated space, aligned with `support`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactTable<X> {
    pub support: Vec<X>,
    pub log_p: Vec<f64>,
    pub f: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_z: f64,
}

pub struct EnergyDistribution<'a, M: GenerativeModel, C: ConstraintModel> {
    model: &'a M,
    ctx: &'a M::Context,
    constraint: &'a C,
    side: &'a C::Side,
    alpha: f64,
}

impl<M: GenerativeModel, C> Clone for EnergyDistribution<'_, M, C>
where
    C: ConstraintModel<Sample = M::Sample>,
{
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: GenerativeModel, C> Copy for EnergyDistribution<'_, M, C> where C: ConstraintModel<Sample = M::Sample> {}

/// Running weighted sums for one chunk, relative to `exp(shift)`.
struct Partial {
    shift: f64,
    sum_w: f64,
    sum_w2: f64,
    acc: Vec<f64>,
}

impl Partial {
    fn merge(parts: Vec<Partial>, dim: usize) -> Partial {
        let shift = parts.iter().map(|p| p.shift).fold(f64::NEG_INFINITY, f64::max);
        let mut out = Partial { shift, sum_w: 0.0, sum_w2: 0.0, acc: vec![0.0; dim] };
        for p in parts {
            let s = (p.shift - shift).exp();
            out.sum_w += s * p.sum_w;
            out.sum_w2 += s * s * p.sum_w2;
            for (a, v) in out.acc.iter_mut().zip(&p.acc) {
                *a += s * v;
            }
        }
        out
    }

    fn ess(&self) -> f64 {
        self.sum_w * self.sum_w / self.sum_w2
    }
}

fn warn_on_low_ess(ess: f64, n: usize) {
    if ess / (n as f64) < ESS_WARN_FRACTION {
        log::warn!("importance sampling ESS {ess:.1} is below {:.0}% of {n} draws", ESS_WARN_FRACTION * 100.0);
    }
}

impl<'a, M, C> EnergyDistribution<'a, M, C>
where
    M: GenerativeModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    pub fn new(model: &'a M, ctx: &'a M::Context, constraint: &'a C, side: &'a C::Side, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { model, ctx, constraint, side, alpha })
    }

    /// Accepts `α = 0`, for degenerate checks where `q` must equal `p_θ`.
    pub fn new_allowing_zero_alpha(model: &'a M, ctx: &'a M::Context, constraint: &'a C, side: &'a C::Side, alpha: f64) -> Result<Self> {
        if alpha == 0.0 {
            return Ok(Self { model, ctx, constraint, side, alpha });
        }
        Self::new(model, ctx, constraint, side, alpha)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn context(&self) -> &'a M::Context {
        self.ctx
    }

    pub fn constraint(&self) -> &'a C {
        self.constraint
    }

    pub fn side(&self) -> &'a C::Side {
        self.side
    }

    /// `α f(x, s)`.
    pub fn log_weight(&self, x: &M::Sample) -> Result<f64> {
        if self.alpha == 0.0 {
            return Ok(0.0);
        }
        let lw = self.alpha * self.constraint.evaluate(x, self.side)?;
        if lw.is_nan() || lw == f64::INFINITY {
            return Err(Error::NonFinite(format!("log weight {lw}")));
        }
        Ok(lw)
    }

    /// Draws `n` samples from `p_θ` chunk by chunk and folds
    /// `visit(x, w, acc)` with chunk-relative weights `w`.
    fn weighted_pass<V>(&self, n: usize, streams: &StreamFamily, plan: ChunkPlan, dim: usize, visit: V) -> Result<Partial>
    where
        V: Fn(&M::Sample, f64, &mut [f64]) -> Result<()> + Sync,
    {
        let chunk = |(index, (_, len)): (usize, (usize, usize))| -> Result<Partial> {
            let mut rng = streams.substream(index as u64);
            let draws: Vec<M::Sample> = (0..len).map(|_| self.model.sample_one(self.ctx, &mut rng)).collect();
            let log_w = draws.iter().map(|x| self.log_weight(x)).collect::<Result<Vec<_>>>()?;
            let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut part = Partial { shift, sum_w: 0.0, sum_w2: 0.0, acc: vec![0.0; dim] };
            if shift == f64::NEG_INFINITY {
                return Ok(part);
            }
            for (x, lw) in draws.iter().zip(&log_w) {
                let w = (lw - shift).exp();
                part.sum_w += w;
                part.sum_w2 += w * w;
                visit(x, w, &mut part.acc)?;
            }
            Ok(part)
        };
        let ranges: Vec<(usize, (usize, usize))> = plan.ranges(n).into_iter().enumerate().collect();
        let parts = if plan.parallel {
            ranges.into_par_iter().map(chunk).collect::<Result<Vec<_>>>()?
        } else {
            ranges.into_iter().map(chunk).collect::<Result<Vec<_>>>()?
        };
        let merged = Partial::merge(parts, dim);
        if merged.shift == f64::NEG_INFINITY || merged.sum_w <= 0.0 {
            return Err(Error::DegenerateWeights("all importance weights are zero".into()));
        }
        Ok(merged)
    }

    /// `Ẑ = (1/n) Σ exp(α f(x_i))`, `x_i ~ p_θ`.
    pub fn estimate_partition(&self, n: usize, streams: &StreamFamily, plan: ChunkPlan) -> Result<ISEstimate> {
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two draws".into()));
        }
        let p = self.weighted_pass(n, streams, plan, 0, |_, _, _| Ok(()))?;
        let nf = n as f64;
        let scale = p.shift.exp();
        let mean = p.sum_w / nf;
        let var = ((p.sum_w2 / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
        let ess = p.ess();
        warn_on_low_ess(ess, n);
        Ok(ISEstimate { value: scale * mean, stderr: scale * (var / nf).sqrt(), ess, n })
    }

    /// Self-normalized estimate of `E_q[h]` for scalar `h`, with a
    /// delta-method standard error.
    pub fn is_expectation<H>(&self, h: H, n: usize, streams: &StreamFamily, opts: IsOptions) -> Result<ISEstimate>
    where
        H: Fn(&M::Sample) -> f64 + Sync,
    {
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two draws".into()));
        }
        // acc = [Σ w h, Σ w² h, Σ w² h²]
        let p = self.weighted_pass(n, streams, opts.plan, 3, |x, w, acc| {
            let v = h(x);
            acc[0] += w * v;
            acc[1] += w * w * v;
            acc[2] += w * w * v * v;
            Ok(())
        })?;
        let ess = p.ess();
        warn_on_low_ess(ess, n);
        let (value, norm) = match opts.normalizer {
            Normalizer::Shared => (p.acc[0] / p.sum_w, p.sum_w),
            Normalizer::Independent => {
                let z = self.independent_normalizer(n, streams, opts.plan)?;
                let num = p.acc[0] * (p.shift - z.shift).exp();
                (num / z.sum_w, p.sum_w)
            }
        };
        let mu = value;
        let var = (p.acc[2] - 2.0 * mu * p.acc[1] + mu * mu * p.sum_w2).max(0.0) / (norm * norm);
        Ok(ISEstimate { value, stderr: var.sqrt(), ess, n })
    }

    fn independent_normalizer(&self, n: usize, streams: &StreamFamily, plan: ChunkPlan) -> Result<Partial> {
        self.weighted_pass(n, &streams.child("normalizer", 0), plan, 0, |_, _, _| Ok(()))
    }

    /// Self-normalized estimate of `E_q[h]` for vector `h`, supplied as an
    /// accumulator `add(x, scale, acc)` performing `acc += scale · h(x)`.
    pub fn is_expectation_vec<A>(&self, dim: usize, add: A, n: usize, streams: &StreamFamily, opts: IsOptions) -> Result<ISVectorEstimate>
    where
        A: Fn(&M::Sample, f64, &mut [f64]) -> Result<()> + Sync,
    {
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two draws".into()));
        }
        let p = self.weighted_pass(n, streams, opts.plan, dim, add)?;
        let ess = p.ess();
        warn_on_low_ess(ess, n);
        let log_z_hat = p.shift + p.sum_w.ln() - (n as f64).ln();
        let z_hat = log_z_hat.exp();
        let values = match opts.normalizer {
            Normalizer::Shared => p.acc.iter().map(|a| a / p.sum_w).collect(),
            Normalizer::Independent => {
                let z = self.independent_normalizer(n, streams, opts.plan)?;
                let s = (p.shift - z.shift).exp();
                p.acc.iter().map(|a| a * s / z.sum_w).collect()
            }
        };
        Ok(ISVectorEstimate { values, z_hat, log_z_hat, ess, n })
    }

    /// Sampling-importance-resampling: `m` particles from `p_θ`, `k` of them
    /// kept by systematic resampling on the weights, returned shuffled.
    pub fn sample_q_sir(&self, m: usize, k: usize, streams: &StreamFamily, plan: ChunkPlan) -> Result<Vec<M::Sample>>
    where
        M::Sample: Send,
    {
        if k == 0 || m < k {
            return Err(Error::InvalidArgument(format!("need m >= k >= 1, got m={m}, k={k}")));
        }
        let chunk = |(index, (_, len)): (usize, (usize, usize))| -> Result<Vec<(M::Sample, f64)>> {
            let mut rng = streams.substream(index as u64);
            (0..len)
                .map(|_| {
                    let x = self.model.sample_one(self.ctx, &mut rng);
                    let lw = self.log_weight(&x)?;
                    Ok((x, lw))
                })
                .collect()
        };
        let ranges: Vec<_> = plan.ranges(m).into_iter().enumerate().collect();
        let chunks = if plan.parallel {
            ranges.into_par_iter().map(chunk).collect::<Result<Vec<_>>>()?
        } else {
            ranges.into_iter().map(chunk).collect::<Result<Vec<_>>>()?
        };
        let particles: Vec<(M::Sample, f64)> = chunks.into_iter().flatten().collect();
        let shift = particles.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights("all importance weights are zero".into()));
        }
        let weights: Vec<f64> = particles.iter().map(|p| (p.1 - shift).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut rng = streams.child("resample", 0).substream(0);
        let u: f64 = rng.random();
        let step = total / k as f64;
        let mut out = Vec::with_capacity(k);
        let mut cum = 0.0;
        let mut j = 0;
        for i in 0..k {
            let point = (i as f64 + u) * step;
            while j + 1 < weights.len() && cum + weights[j] <= point {
                cum += weights[j];
                j += 1;
            }
            out.push(particles[j].0.clone());
        }
        out.shuffle(&mut rng);
        Ok(out)
    }
}

impl<M, C> EnergyDistribution<'_, M, C>
where
    M: ExplicitModel,
    M::Sample: SpaceElement,
    C: ConstraintModel<Sample = M::Sample>,
{
    /// `q` by enumeration of the model's space.
    pub fn exact_q(&self, cap: u64) -> Result<ExactTable<M::Sample>> {
        let support = M::Sample::enumerate_space(&self.model.space(), cap)?;
        self.exact_q_over(support)
    }

    /// `q` restricted to (and normalized over) the given elements.
    pub fn exact_q_over(&self, support: Vec<M::Sample>) -> Result<ExactTable<M::Sample>> {
        let log_p = support.iter().map(|x| self.model.log_prob(self.ctx, x)).collect::<Result<Vec<_>>>()?;
        let f = support.iter().map(|x| self.constraint.evaluate(x, self.side)).collect::<Result<Vec<_>>>()?;
        let log_u: Vec<f64> = log_p.iter().zip(&f).map(|(lp, fx)| lp + if self.alpha == 0.0 { 0.0 } else { self.alpha * fx }).collect();
        let log_z = log_sum_exp(&log_u);
        if !log_z.is_finite() {
            return Err(Error::DegenerateWeights(format!("log partition {log_z}")));
        }
        let probs = log_u.iter().map(|l| (l - log_z).exp()).collect();
        Ok(ExactTable { support, log_p, f, probs, log_z })
    }

    /// `Z = Σ_x p_θ(x) exp(α f(x))`.
    pub fn exact_partition(&self, cap: u64) -> Result<f64> {
        Ok(self.exact_q(cap)?.log_z.exp())
    }

    /// Exact `E_q[h]` for an accumulator-style vector `h`.
    pub fn exact_expectation_vec<A>(&self, table: &ExactTable<M::Sample>, dim: usize, add: A) -> Result<Vec<f64>>
    where
        A: Fn(&M::Sample, f64, &mut [f64]) -> Result<()>,
    {
        let mut acc = vec![0.0; dim];
        for (x, p) in table.support.iter().zip(&table.probs) {
            if *p > 0.0 {
                add(x, *p, &mut acc)?;
            }
        }
        Ok(acc)
    }
}

impl<X> ExactTable<X> {
    /// `KL(q'‖p_θ) − α E_{q'}[f]` for a table `q'` aligned with `support`.
    pub fn pr_objective(&self, q: &[f64], alpha: f64) -> Result<f64> {
        if q.len() != self.probs.len() {
            return Err(Error::DimensionMismatch { expected: self.probs.len(), got: q.len() });
        }
        let sum: f64 = q.iter().sum();
        if q.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotADistribution(format!("mass {sum}")));
        }
        let mut value = 0.0;
        for ((qi, lp), fx) in q.iter().zip(&self.log_p).zip(&self.f) {
            if *qi == 0.0 {
                continue;
            }
            if *lp == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            value += qi * (qi.ln() - lp) - alpha * qi * fx;
        }
        Ok(value)
    }

    /// `L(θ, q*) = −log Z`.
    pub fn optimal_objective(&self) -> f64 {
        -self.log_z
    }
}

/// Appends one estimate row to a diagnostics CSV, writing the header for a
/// new file.
pub fn append_estimate_csv(path: impl AsRef<Path>, label: &str, seed: u64, est: &ISEstimate) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        estimate: &'a str,
        value: f64,
        stderr: f64,
        ess: f64,
        n: usize,
        seed: u64,
    }
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(Row { estimate: label, value: est.value, stderr: est.stderr, ess: est.ess, n: est.n, seed })?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{FeatureMap, LinearFeatureConstraint};
    use crate::model::{CategoricalModel, DEFAULT_ENUMERATION_CAP};
    use crate::oracle::{frequency_test, histogram, tv_distance_vec};

    type Lin = LinearFeatureConstraint<usize, ()>;

    fn standard() -> (CategoricalModel, Lin) {
        let p = CategoricalModel::from_probs(&[0.5, 0.5]).unwrap();
        let f = Lin::new(FeatureMap::outcome_table("f", vec![vec![0.0], vec![2f64.ln()]]).unwrap(), vec![1.0]).unwrap();
        (p, f)
    }

    fn zero_f(k: usize) -> Lin {
        Lin::zeros(FeatureMap::outcome_one_hot(k))
    }

    #[test]
    fn exact_q_examples() {
        let (p, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let t = q.exact_q(DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((t.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.probs[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((q.exact_partition(DEFAULT_ENUMERATION_CAP).unwrap() - 1.5).abs() < 1e-12);
        assert!((t.pr_objective(&t.probs, 1.0).unwrap() + 1.5f64.ln()).abs() < 1e-12);

        let p3 = CategoricalModel::from_logits(vec![0.3, -1.0, 2.0]).unwrap();
        let z = zero_f(3);
        let q0 = EnergyDistribution::new(&p3, &(), &z, &(), 1.0).unwrap();
        let t0 = q0.exact_q(DEFAULT_ENUMERATION_CAP).unwrap();
        for (a, b) in t0.probs.iter().zip(p3.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((t0.log_z).abs() < 1e-12);
        assert!(t0.pr_objective(&p3.probs(), 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_shift_scales_partition() {
        let p = CategoricalModel::from_logits(vec![0.1, 0.7, -0.4]).unwrap();
        let table = vec![vec![0.2], vec![-0.5], vec![1.0]];
        let c = 0.8;
        let f = Lin::new(FeatureMap::outcome_table("f", table.clone()).unwrap(), vec![1.0]).unwrap();
        let g = Lin::new(FeatureMap::outcome_table("g", table.iter().map(|r| vec![r[0] + c]).collect()).unwrap(), vec![1.0]).unwrap();
        let qf = EnergyDistribution::new(&p, &(), &f, &(), 1.5).unwrap();
        let qg = EnergyDistribution::new(&p, &(), &g, &(), 1.5).unwrap();
        let (tf, tg) = (qf.exact_q(1000).unwrap(), qg.exact_q(1000).unwrap());
        assert!((tg.log_z - tf.log_z - 1.5 * c).abs() < 1e-12);
        for (a, b) in tf.probs.iter().zip(&tg.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_must_be_positive() {
        let (p, f) = standard();
        assert!(EnergyDistribution::new(&p, &(), &f, &(), 0.0).is_err());
        assert!(EnergyDistribution::new(&p, &(), &f, &(), -1.0).is_err());
        assert!(EnergyDistribution::new_allowing_zero_alpha(&p, &(), &f, &(), 0.0).is_ok());
    }

    #[test]
    fn zero_constraint_partition_is_exactly_one() {
        let p = CategoricalModel::from_logits(vec![0.0, 1.0, 2.0]).unwrap();
        let f = zero_f(3);
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let est = q.estimate_partition(1000, &StreamFamily::new(1, "z"), ChunkPlan::default()).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.ess, 1000.0);
    }

    #[test]
    fn identical_draws_have_full_ess() {
        let p = CategoricalModel::from_logits(vec![40.0, 0.0]).unwrap();
        let (_, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let est = q.estimate_partition(2, &StreamFamily::new(3, "z"), ChunkPlan::default()).unwrap();
        assert_eq!(est.ess, 2.0);
        assert_eq!(est.stderr, 0.0);
        assert!(q.estimate_partition(1, &StreamFamily::new(3, "z"), ChunkPlan::default()).is_err());
    }

    #[test]
    fn constant_expectation_is_exactly_one() {
        let (p, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        for seed in 0..5 {
            let est = q.is_expectation(|_| 1.0, 777, &StreamFamily::new(seed, "h"), IsOptions::default()).unwrap();
            assert_eq!(est.value, 1.0);
        }
    }

    #[test]
    fn zero_constraint_gives_plain_monte_carlo() {
        let p = CategoricalModel::from_logits(vec![0.0, 1.0, -1.0]).unwrap();
        let f = zero_f(3);
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let streams = StreamFamily::new(9, "mc");
        let plan = ChunkPlan::sequential(100);
        let est = q.is_expectation(|x| *x as f64, 1000, &streams, IsOptions { plan, ..Default::default() }).unwrap();
        let mut draws = Vec::new();
        for (i, (_, len)) in plan.ranges(1000).into_iter().enumerate() {
            draws.extend(p.sample(&(), &mut streams.substream(i as u64), len).unwrap());
        }
        let mean = draws.iter().map(|x| *x as f64).sum::<f64>() / 1000.0;
        assert!((est.value - mean).abs() < 1e-12);
    }

    #[test]
    fn chunked_result_does_not_depend_on_threading() {
        let (p, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let s = StreamFamily::new(4, "par");
        let a = q
            .is_expectation(|x| *x as f64, 50_000, &s, IsOptions { plan: ChunkPlan { chunk_size: 1000, parallel: true }, ..Default::default() })
            .unwrap();
        let b = q.is_expectation(|x| *x as f64, 50_000, &s, IsOptions { plan: ChunkPlan::sequential(1000), ..Default::default() }).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.ess.to_bits(), b.ess.to_bits());
    }

    #[test]
    fn estimates_match_standard_instance() {
        let (p, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let s = StreamFamily::new(11, "std");
        let z = q.estimate_partition(100_000, &s, ChunkPlan::default()).unwrap();
        assert!((z.value - 1.5).abs() < 0.015);
        let e = q.is_expectation(|x| *x as f64, 100_000, &s, IsOptions::default()).unwrap();
        assert!((e.value - 2.0 / 3.0).abs() < 2.0 / 300.0);
        let ind = q.is_expectation(|x| *x as f64, 100_000, &s, IsOptions { normalizer: Normalizer::Independent, ..Default::default() }).unwrap();
        assert!((ind.value - 2.0 / 3.0).abs() < 0.02);
        let v = q
            .is_expectation_vec(
                2,
                |x, w, acc| {
                    acc[*x] += w;
                    Ok(())
                },
                100_000,
                &s,
                IsOptions::default(),
            )
            .unwrap();
        assert!((v.values[0] + v.values[1] - 1.0).abs() < 1e-12);
        assert!((v.values[1] - e.value).abs() < 1e-12);
        assert!((v.z_hat - z.value).abs() < 1e-12);
    }

    #[test]
    fn sir_matches_exact_q() {
        let (p, f) = standard();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let draws = q.sample_q_sir(200_000, 20_000, &StreamFamily::new(2, "sir"), ChunkPlan::default()).unwrap();
        let h = histogram(draws.iter().copied(), 2);
        let emp: Vec<f64> = h.iter().map(|c| *c as f64 / 20_000.0).collect();
        assert!(tv_distance_vec(&emp, &[1.0 / 3.0, 2.0 / 3.0]) <= 0.02);
        assert!(frequency_test(&h, &[1.0 / 3.0, 2.0 / 3.0], 1e-3).unwrap().passed);
    }

    #[test]
    fn sir_with_equal_weights_permutes_particles() {
        let p = CategoricalModel::from_logits(vec![0.0, 0.5, 1.0, -0.2]).unwrap();
        let f = zero_f(4);
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let streams = StreamFamily::new(6, "perm");
        let plan = ChunkPlan::sequential(64);
        let mut out = q.sample_q_sir(500, 500, &streams, plan).unwrap();
        let mut particles = Vec::new();
        for (i, (_, len)) in plan.ranges(500).into_iter().enumerate() {
            particles.extend(p.sample(&(), &mut streams.substream(i as u64), len).unwrap());
        }
        out.sort();
        particles.sort();
        assert_eq!(out, particles);
    }

    #[test]
    fn large_alpha_f_does_not_overflow() {
        let p = CategoricalModel::from_probs(&[0.5, 0.5]).unwrap();
        let f = Lin::new(FeatureMap::outcome_table("f", vec![vec![-700.0], vec![700.0]]).unwrap(), vec![1.0]).unwrap();
        let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap();
        let t = q.exact_q(10).unwrap();
        assert!(t.log_z.is_finite());
        let e = q.is_expectation(|x| *x as f64, 1000, &StreamFamily::new(0, "big"), IsOptions::default()).unwrap();
        assert!(e.value.is_finite());
    }

    #[test]
    fn pr_objective_rejects_non_distributions() {
        let (p, f) = standard();
        let t = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap().exact_q(10).unwrap();
        assert!(t.pr_objective(&[0.5, 0.6], 1.0).is_err());
        assert!(t.pr_objective(&[1.2, -0.2], 1.0).is_err());
    }

    #[test]
    fn csv_diagnostics_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimates.csv");
        let est = ISEstimate { value: 1.5, stderr: 0.01, ess: 90.0, n: 100 };
        append_estimate_csv(&path, "z_hat", 7, &est).unwrap();
        append_estimate_csv(&path, "z_hat", 8, &est).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("estimate,value,stderr,ess,n,seed"));
    }
}

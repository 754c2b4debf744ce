//! Gradient operations of the joint learning loop.
//!
//! Conventions: constraint gradients are ascent directions for `φ`;
//! `pr_direction` is the ascent direction for `θ` of the regularization term;
//! `original_objective` returns the value and descent gradient of `L(θ)`.

use serde::{Deserialize, Serialize};

use super::{DemoOf, DistanceKind};
use crate::constraints::ConstraintModel;
use crate::energy::{EnergyDistribution, IsOptions};
use crate::error::{Error, Result};
use crate::model::{CellFeatures, ExplicitModel, GenerativeModel, Grid, ImplicitModel, ImplicitPushforwardModel, SpaceElement};
use crate::params::ParamVector;
use crate::rng::{ChunkPlan, StreamFamily};

/// How expectations under `q` are computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    /// Enumeration of the sample space (explicit models only).
    Exact { cap: u64 },
    /// Self-normalized importance sampling with `n` draws from `p_θ`.
    Sampled { n: usize, options: IsOptions },
}

impl Estimator {
    pub fn sampled(n: usize) -> Self {
        Self::Sampled { n, options: IsOptions::default() }
    }

    fn plan(&self) -> ChunkPlan {
        match self {
            Self::Exact { .. } => ChunkPlan::default(),
            Self::Sampled { options, .. } => options.plan,
        }
    }
}

/// A `q` expectation together with the normalizer and weight diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct QStats {
    pub values: Vec<f64>,
    /// `Z` (exact) or `Ẑ` (sampled).
    pub z: f64,
    pub log_z: f64,
    /// Effective sample size; for exact tables `1 / Σ q²`.
    pub ess: f64,
}

/// What the training loop needs from a model class.
pub trait PrModel: GenerativeModel + Clone {
    /// `E_q[h]` for one instance, `h` supplied as `add(x, scale, acc)`
    /// performing `acc += scale · h(x)`.
    #[allow(clippy::too_many_arguments)]
    fn q_expectation<C, A>(
        &self,
        ctx: &Self::Context,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        dim: usize,
        add: A,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<QStats>
    where
        C: ConstraintModel<Sample = Self::Sample>,
        A: Fn(&Self::Sample, f64, &mut [f64]) -> Result<()> + Sync;

    /// Ascent direction for `θ` of the regularization term on one instance:
    /// `E_q[∇_θ log p_θ]` for explicit models, the pathwise
    /// `α E_z[∇_θ f(g_θ(z))]` for implicit ones.
    fn pr_direction<C>(
        &self,
        ctx: &Self::Context,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<Vec<f64>>
    where
        C: ConstraintModel<Sample = Self::Sample>;

    /// Value and descent gradient of `L(θ)` over `demos`.
    fn original_objective<S>(
        &self,
        demos: &[&DemoOf<Self, S>],
        distance: DistanceKind,
        draws: usize,
        streams: &StreamFamily,
    ) -> Result<(f64, Vec<f64>)>;

    /// `log p_θ(x)` when the class has a density.
    fn density(&self, ctx: &Self::Context, x: &Self::Sample) -> Option<Result<f64>>;
}

impl<M> PrModel for M
where
    M: ExplicitModel + Clone,
    M::Sample: SpaceElement,
{
    fn q_expectation<C, A>(
        &self,
        ctx: &M::Context,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        dim: usize,
        add: A,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<QStats>
    where
        C: ConstraintModel<Sample = M::Sample>,
        A: Fn(&M::Sample, f64, &mut [f64]) -> Result<()> + Sync,
    {
        let q = EnergyDistribution::new_allowing_zero_alpha(self, ctx, constraint, side, alpha)?;
        match est {
            Estimator::Exact { cap } => {
                let table = q.exact_q(*cap)?;
                let values = q.exact_expectation_vec(&table, dim, add)?;
                let ess = 1.0 / table.probs.iter().map(|p| p * p).sum::<f64>();
                Ok(QStats { values, z: table.log_z.exp(), log_z: table.log_z, ess })
            }
            Estimator::Sampled { n, options } => {
                let e = q.is_expectation_vec(dim, add, *n, streams, *options)?;
                Ok(QStats { values: e.values, z: e.z_hat, log_z: e.log_z_hat, ess: e.ess })
            }
        }
    }

    fn pr_direction<C>(
        &self,
        ctx: &M::Context,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<Vec<f64>>
    where
        C: ConstraintModel<Sample = M::Sample>,
    {
        mstep_explicit(self, ctx, constraint, side, alpha, est, streams)
    }

    fn original_objective<S>(
        &self,
        demos: &[&DemoOf<Self, S>],
        _distance: DistanceKind,
        _draws: usize,
        _streams: &StreamFamily,
    ) -> Result<(f64, Vec<f64>)> {
        if demos.is_empty() {
            return Err(Error::InvalidArgument("original objective needs at least one demonstration".into()));
        }
        let scale = 1.0 / demos.len() as f64;
        let mut grad = vec![0.0; self.params().len()];
        let mut nll = 0.0;
        for d in demos {
            nll -= self.log_prob(&d.context, &d.sample)?;
            self.accumulate_grad_log_prob(&d.context, &d.sample, -scale, &mut grad)?;
        }
        Ok((nll * scale, grad))
    }

    fn density(&self, ctx: &M::Context, x: &M::Sample) -> Option<Result<f64>> {
        Some(self.log_prob(ctx, x))
    }
}

impl PrModel for ImplicitPushforwardModel {
    fn q_expectation<C, A>(
        &self,
        ctx: &CellFeatures,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        dim: usize,
        add: A,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<QStats>
    where
        C: ConstraintModel<Sample = Grid>,
        A: Fn(&Grid, f64, &mut [f64]) -> Result<()> + Sync,
    {
        match est {
            Estimator::Exact { .. } => Err(Error::ImplicitDensity),
            Estimator::Sampled { n, options } => {
                let q = EnergyDistribution::new_allowing_zero_alpha(self, ctx, constraint, side, alpha)?;
                let e = q.is_expectation_vec(dim, add, *n, streams, *options)?;
                Ok(QStats { values: e.values, z: e.z_hat, log_z: e.log_z_hat, ess: e.ess })
            }
        }
    }

    fn pr_direction<C>(
        &self,
        ctx: &CellFeatures,
        constraint: &C,
        side: &C::Side,
        alpha: f64,
        est: &Estimator,
        streams: &StreamFamily,
    ) -> Result<Vec<f64>>
    where
        C: ConstraintModel<Sample = Grid>,
    {
        let n = match est {
            Estimator::Sampled { n, .. } => *n,
            Estimator::Exact { .. } => return Err(Error::ImplicitDensity),
        };
        mstep_implicit(self, ctx, constraint, side, alpha, n, est.plan(), streams)
    }

    fn original_objective<S>(
        &self,
        demos: &[&DemoOf<Self, S>],
        distance: DistanceKind,
        draws: usize,
        streams: &StreamFamily,
    ) -> Result<(f64, Vec<f64>)> {
        if demos.is_empty() {
            return Err(Error::InvalidArgument("original objective needs at least one demonstration".into()));
        }
        let draws = draws.max(1);
        let mut rng = streams.substream(0);
        let noise: Vec<Vec<f64>> = (0..draws).map(|_| self.draw_noise(&mut rng)).collect();
        let mut grad = vec![0.0; self.params().len()];
        let mut loss = 0.0;
        for d in demos {
            let cells = d.sample.cells() as f64;
            let scale = 1.0 / (demos.len() * draws) as f64 / cells;
            for z in &noise {
                let g = self.push(&d.context, z);
                if g.cells() != d.sample.cells() {
                    return Err(Error::DimensionMismatch { expected: d.sample.cells(), got: g.cells() });
                }
                let mut upstream = Vec::with_capacity(g.cells());
                for (a, b) in g.values.iter().zip(&d.sample.values) {
                    let r = a - b;
                    let (l, dl) = match distance {
                        DistanceKind::Squared => (r * r, 2.0 * r),
                        DistanceKind::L1 => (
                            r.abs(),
                            if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            },
                        ),
                    };
                    loss += scale * l;
                    upstream.push(scale * dl);
                }
                for (a, v) in grad.iter_mut().zip(self.pullback_params(&d.context, z, &upstream)?) {
                    *a += v;
                }
            }
        }
        Ok((loss, grad))
    }

    fn density(&self, _: &CellFeatures, _: &Grid) -> Option<Result<f64>> {
        None
    }
}

/// `∇_φ log q(x_d) = α (∇_φ f(x_d, s_d) − E_{q_d}[∇_φ f(·, s_d)])`, averaged
/// over `demos`. Ascent direction for the constraint log-likelihood.
pub fn constraint_grad_maxent<M, C>(
    demos: &[&DemoOf<M, C::Side>],
    model: &M,
    constraint: &C,
    alpha: f64,
    est: &Estimator,
    streams: &StreamFamily,
) -> Result<(ParamVector, Vec<QStats>)>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    if demos.is_empty() {
        return Err(Error::InvalidArgument("constraint gradient needs demonstrations".into()));
    }
    let dim = constraint.params().len();
    let scale = alpha / demos.len() as f64;
    let mut grad = vec![0.0; dim];
    let mut stats = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        constraint.accumulate_grad_params(&d.sample, &d.side, scale, &mut grad)?;
        let s = model.q_expectation(
            &d.context,
            constraint,
            &d.side,
            alpha,
            dim,
            |x, w, acc| constraint.accumulate_grad_params(x, &d.side, w, acc),
            est,
            &streams.child("instance", i as u64),
        )?;
        for (g, v) in grad.iter_mut().zip(&s.values) {
            *g -= scale * v;
        }
        stats.push(s);
    }
    Ok((ParamVector::new(constraint.params().layout().clone(), grad)?, stats))
}

/// `∇_φ E_q[f_φ]` where `q` itself depends on `φ`:
/// `E_q[∇f] + α (E_q[f ∇f] − E_q[f] E_q[∇f])`, averaged over the instances
/// of `demos` (their samples are not used).
pub fn constraint_grad_naive<M, C>(
    demos: &[&DemoOf<M, C::Side>],
    model: &M,
    constraint: &C,
    alpha: f64,
    est: &Estimator,
    streams: &StreamFamily,
) -> Result<(ParamVector, Vec<QStats>)>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    if demos.is_empty() {
        return Err(Error::InvalidArgument("constraint gradient needs instances".into()));
    }
    let p = constraint.params().len();
    let mut grad = vec![0.0; p];
    let mut stats = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        // acc = [E ∇f (p), E f (1), E f ∇f (p)]
        let s = model.q_expectation(
            &d.context,
            constraint,
            &d.side,
            alpha,
            2 * p + 1,
            |x, w, acc| {
                let fx = constraint.evaluate(x, &d.side)?;
                constraint.accumulate_grad_params(x, &d.side, w, &mut acc[..p])?;
                acc[p] += w * fx;
                constraint.accumulate_grad_params(x, &d.side, w * fx, &mut acc[p + 1..])
            },
            est,
            &streams.child("instance", i as u64),
        )?;
        let (e_grad, rest) = s.values.split_at(p);
        let e_f = rest[0];
        let e_fgrad = &rest[1..];
        for j in 0..p {
            grad[j] += (e_grad[j] + alpha * (e_fgrad[j] - e_f * e_grad[j])) / demos.len() as f64;
        }
        stats.push(QStats { values: Vec::new(), z: s.z, log_z: s.log_z, ess: s.ess });
    }
    Ok((ParamVector::new(constraint.params().layout().clone(), grad)?, stats))
}

/// The adversarial variant: `q` replaced by `p_θ`,
/// `α (E_{p_d}[∇f] − E_{p_θ}[∇f])`.
pub fn constraint_grad_gan<M, C>(
    demos: &[&DemoOf<M, C::Side>],
    model: &M,
    constraint: &C,
    alpha: f64,
    est: &Estimator,
    streams: &StreamFamily,
) -> Result<ParamVector>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    if demos.is_empty() {
        return Err(Error::InvalidArgument("constraint gradient needs demonstrations".into()));
    }
    let dim = constraint.params().len();
    let scale = alpha / demos.len() as f64;
    let mut grad = vec![0.0; dim];
    for (i, d) in demos.iter().enumerate() {
        constraint.accumulate_grad_params(&d.sample, &d.side, scale, &mut grad)?;
        let s = model.q_expectation(
            &d.context,
            constraint,
            &d.side,
            0.0,
            dim,
            |x, w, acc| constraint.accumulate_grad_params(x, &d.side, w, acc),
            est,
            &streams.child("instance", i as u64),
        )?;
        for (g, v) in grad.iter_mut().zip(&s.values) {
            *g -= scale * v;
        }
    }
    ParamVector::new(constraint.params().layout().clone(), grad)
}

/// `E_q[∇_θ log p_θ(x)]` for one instance: the ascent direction of
/// `E_q[log p_θ]`.
pub fn mstep_explicit<M, C>(
    model: &M,
    ctx: &M::Context,
    constraint: &C,
    side: &C::Side,
    alpha: f64,
    est: &Estimator,
    streams: &StreamFamily,
) -> Result<Vec<f64>>
where
    M: ExplicitModel + Clone,
    M::Sample: SpaceElement,
    C: ConstraintModel<Sample = M::Sample>,
{
    let dim = model.params().len();
    let s = model.q_expectation(ctx, constraint, side, alpha, dim, |x, w, acc| model.accumulate_grad_log_prob(ctx, x, w, acc), est, streams)?;
    Ok(s.values)
}

/// Pathwise `α · mean_z (∂g_θ(z)/∂θ)ᵀ ∇_x f(g_θ(z), s)` over `n` noise
/// draws: the gradient of `E_{p_θ}[α f]`, which is the negative gradient of
/// the reverse KL `KL(p_θ ‖ q)` at the current `θ`.
#[allow(clippy::too_many_arguments)]
pub fn mstep_implicit<M, C>(
    model: &M,
    ctx: &M::Context,
    constraint: &C,
    side: &C::Side,
    alpha: f64,
    n: usize,
    plan: ChunkPlan,
    streams: &StreamFamily,
) -> Result<Vec<f64>>
where
    M: ImplicitModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one noise draw".into()));
    }
    let noise: Vec<Vec<f64>> = plan
        .ranges(n)
        .into_iter()
        .enumerate()
        .flat_map(|(i, (_, len))| {
            let mut rng = streams.substream(i as u64);
            (0..len).map(|_| model.draw_noise(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    pathwise_gradient(model, ctx, constraint, side, alpha, &noise)
}

/// As [`mstep_implicit`] over given noise vectors.
pub fn pathwise_gradient<M, C>(model: &M, ctx: &M::Context, constraint: &C, side: &C::Side, alpha: f64, noise: &[Vec<f64>]) -> Result<Vec<f64>>
where
    M: ImplicitModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    let mut grad = vec![0.0; model.params().len()];
    let scale = alpha / noise.len() as f64;
    for z in noise {
        let x = model.push(ctx, z);
        let dx = constraint.grad_sample(&x, side)?;
        let upstream: Vec<f64> = dx.iter().map(|v| scale * v).collect();
        for (g, v) in grad.iter_mut().zip(model.pullback_params(ctx, z, &upstream)?) {
            *g += v;
        }
    }
    Ok(grad)
}

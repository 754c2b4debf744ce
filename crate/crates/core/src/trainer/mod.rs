//! Joint learning of a generative model and its constraint.
//!
//! Each iteration first moves `φ` (selector-dependent), then moves `θ` on
//! `L(θ) + λ L(θ, q)`, using the M-step gradient for explicit models and
//! the reverse-KL pathwise gradient for implicit ones.

mod ops;

pub use ops::{
    constraint_grad_gan, constraint_grad_maxent, constraint_grad_naive, mstep_explicit, mstep_implicit, pathwise_gradient, Estimator, PrModel, QStats,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::constraints::{mask_frozen, ConstraintModel};
use crate::energy::{IsOptions, Normalizer};
use crate::error::{Error, Result};
use crate::model::{GenerativeModel, DEFAULT_ENUMERATION_CAP};
use crate::params::ParamVector;
use crate::rng::{ChunkPlan, StreamFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    /// Constraint learned by the MaxEnt-IRL gradient.
    Full,
    /// Constraint kept at its initial (pre-trained) value.
    FixedConstraint,
    /// Constraint fitted to the regularized model's own samples.
    NaiveEq5,
    /// Constraint learned against plain model samples.
    GanStyle,
    /// `L(θ)` only.
    BaseOnly,
}

impl Selector {
    pub const ALL: [Selector; 5] = [Self::Full, Self::FixedConstraint, Self::NaiveEq5, Self::GanStyle, Self::BaseOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::FixedConstraint => "fixed-constraint",
            Self::NaiveEq5 => "naive-eq5",
            Self::GanStyle => "gan-style",
            Self::BaseOnly => "base-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown selector {s}")))
    }

    fn updates_constraint(self) -> bool {
        matches!(self, Self::Full | Self::NaiveEq5 | Self::GanStyle)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    Squared,
    L1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[default]
    Sampled,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    /// Draws per importance-sampling estimate.
    pub n_samples: usize,
    pub theta_rate: f64,
    pub phi_rate: f64,
    pub iterations: usize,
    pub selector: Selector,
    pub seed: u64,
    /// Heavy-ball coefficient; `None` is plain gradient steps.
    pub momentum: Option<f64>,
    /// Instances per constraint / regularization step.
    pub batch_size: usize,
    pub phi_steps: usize,
    pub theta_steps: usize,
    pub estimator: EstimatorKind,
    pub enumeration_cap: u64,
    pub normalizer: Normalizer,
    pub chunk_size: usize,
    pub parallel: bool,
    pub distance: DistanceKind,
    /// Noise draws per instance in the implicit models' `L(θ)`.
    pub original_draws: usize,
    /// Training instances used for the per-iteration diagnostics.
    pub eval_instances: usize,
    /// Constraint parameter blocks that never move.
    pub frozen_blocks: Vec<String>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Fill the `seconds` column; off keeps reports byte-identical.
    pub record_wall_time: bool,
    pub metric_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 1.0,
            n_samples: 10_000,
            theta_rate: 0.1,
            phi_rate: 0.05,
            iterations: 100,
            selector: Selector::Full,
            seed: 0,
            momentum: None,
            batch_size: 16,
            phi_steps: 1,
            theta_steps: 1,
            estimator: EstimatorKind::Sampled,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            normalizer: Normalizer::Shared,
            chunk_size: 4096,
            parallel: true,
            distance: DistanceKind::Squared,
            original_draws: 4,
            eval_instances: 16,
            frozen_blocks: Vec::new(),
            checkpoint_every: None,
            checkpoint_dir: None,
            record_wall_time: false,
            metric_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if !(self.theta_rate > 0.0 && self.phi_rate > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.n_samples < 100 {
            return bad("n_samples must be at least 100");
        }
        if self.batch_size == 0 || self.phi_steps == 0 || self.theta_steps == 0 || self.chunk_size == 0 || self.metric_every == 0 {
            return bad("batch_size, phi_steps, theta_steps, chunk_size and metric_every must be positive");
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive");
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir");
        }
        Ok(())
    }

    pub fn estimator(&self) -> Estimator {
        match self.estimator {
            EstimatorKind::Exact => Estimator::Exact { cap: self.enumeration_cap },
            EstimatorKind::Sampled => Estimator::Sampled {
                n: self.n_samples,
                options: IsOptions { plan: ChunkPlan { chunk_size: self.chunk_size, parallel: self.parallel }, normalizer: self.normalizer },
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// One demonstration: the observed sample, its side information and the
/// conditioning context the model sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo<X, S, Ctx> {
    pub sample: X,
    pub side: S,
    pub context: Ctx,
    pub split: Split,
}

pub type DemoOf<M, S> = Demo<<M as GenerativeModel>::Sample, S, <M as GenerativeModel>::Context>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet<X, S, Ctx> {
    records: Vec<Demo<X, S, Ctx>>,
}

impl<X, S, Ctx> DemonstrationSet<X, S, Ctx> {
    pub fn new(records: Vec<Demo<X, S, Ctx>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("demonstration set is empty".into()));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Demo<X, S, Ctx>] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&Demo<X, S, Ctx>> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Demo<X, S, Ctx>> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Demo<X, S, Ctx>> {
        self.split(Split::Test)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One row of the training report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    /// `L(θ) + λ L(θ, q*)`, with `L(θ, q*) = −log Z` averaged over the
    /// diagnostic instances.
    pub loss_total: f64,
    pub loss_original: f64,
    pub kl_q_p: f64,
    /// `E_{p_d}[log q]` over the diagnostic instances (for implicit models
    /// the `θ`-only term `log p_θ(x)` is left out).
    pub constraint_ll: f64,
    pub task_metric: f64,
    pub z_hat: f64,
    pub ess: f64,
    pub seconds: f64,
}

impl TrainRecord {
    fn check_finite(&self) -> Result<()> {
        let fields = [
            ("loss_total", self.loss_total),
            ("loss_original", self.loss_original),
            ("kl_q_p", self.kl_q_p),
            ("constraint_ll", self.constraint_ll),
            ("task_metric", self.task_metric),
            ("z_hat", self.z_hat),
            ("ess", self.ess),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFinite(format!("{name} = {v} at iteration {}", self.iteration))),
            None => Ok(()),
        }
    }
}

pub const REPORT_HEADER: &str = "iteration,loss_total,loss_original,kl_q_p,constraint_ll,task_metric,z_hat,ess,seconds";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            return Ok(format!("{REPORT_HEADER}\n"));
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<TrainRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_total).collect()
    }
}

/// Per-iteration summary of `q` on the diagnostic instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrDiagnostics {
    /// Mean of `−log Z_d`.
    pub neg_log_z: f64,
    pub kl_q_p: f64,
    pub constraint_ll: f64,
    pub z_hat: f64,
    pub ess: f64,
}

/// Task-specific pieces of the loop.
pub trait TrainHooks<M, C>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    /// Test metric of the current model; `None` reports `L(θ)` instead.
    fn task_metric(&self, _model: &M, _constraint: &C) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Replaces the generic diagnostics (e.g. with exact values).
    fn diagnostics(&self, _model: &M, _constraint: &C, _alpha: f64) -> Option<Result<PrDiagnostics>> {
        None
    }
}

/// Hooks with no task metric and generic diagnostics.
pub struct NoHooks;

impl<M, C> TrainHooks<M, C> for NoHooks
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<M, C> {
    /// Iterations already completed.
    pub iteration: usize,
    pub model: M,
    pub constraint: C,
    pub theta_velocity: Vec<f64>,
    pub phi_velocity: Vec<f64>,
}

impl<M: GenerativeModel, C: ConstraintModel> TrainState<M, C> {
    pub fn fresh(model: M, constraint: C) -> Self {
        let (t, p) = (model.params().len(), constraint.params().len());
        Self { iteration: 0, model, constraint, theta_velocity: vec![0.0; t], phi_velocity: vec![0.0; p] }
    }

    fn file(dir: &Path, iteration: usize, component: &str) -> PathBuf {
        dir.join(format!("iter{iteration:06}_{component}.json"))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let t = self.iteration;
        self.model.params().save(Self::file(dir, t, "theta"))?;
        self.constraint.params().save(Self::file(dir, t, "phi"))?;
        ParamVector::new(self.model.params().layout().clone(), self.theta_velocity.clone())?.save(Self::file(dir, t, "theta_velocity"))?;
        ParamVector::new(self.constraint.params().layout().clone(), self.phi_velocity.clone())?.save(Self::file(dir, t, "phi_velocity"))?;
        Ok(())
    }

    /// Restores the checkpoint written after `iteration` completed iterations,
    /// using `model` and `constraint` for the architecture.
    pub fn load(dir: impl AsRef<Path>, iteration: usize, model: &M, constraint: &C) -> Result<Self>
    where
        C: Sized,
    {
        let dir = dir.as_ref();
        let theta = ParamVector::load(Self::file(dir, iteration, "theta"))?;
        let phi = ParamVector::load(Self::file(dir, iteration, "phi"))?;
        let tv = ParamVector::load(Self::file(dir, iteration, "theta_velocity"))?;
        let pv = ParamVector::load(Self::file(dir, iteration, "phi_velocity"))?;
        Ok(Self {
            iteration,
            model: model.with_params(theta)?,
            constraint: constraint.with_params(phi)?,
            theta_velocity: tv.values().to_vec(),
            phi_velocity: pv.values().to_vec(),
        })
    }
}

pub struct TrainOutcome<M, C> {
    pub report: TrainReport,
    pub state: TrainState<M, C>,
}

/// Generic diagnostics from `q` expectations on `eval`.
pub fn pr_diagnostics<M, C>(
    model: &M,
    constraint: &C,
    alpha: f64,
    eval: &[&DemoOf<M, C::Side>],
    est: &Estimator,
    streams: &StreamFamily,
) -> Result<PrDiagnostics>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample>,
{
    if eval.is_empty() {
        return Err(Error::InvalidArgument("no diagnostic instances".into()));
    }
    let mut acc = PrDiagnostics { neg_log_z: 0.0, kl_q_p: 0.0, constraint_ll: 0.0, z_hat: 0.0, ess: 0.0 };
    for (i, d) in eval.iter().enumerate() {
        let s = model.q_expectation(
            &d.context,
            constraint,
            &d.side,
            alpha,
            1,
            |x, w, a| {
                a[0] += w * constraint.evaluate(x, &d.side)?;
                Ok(())
            },
            est,
            &streams.child("instance", i as u64),
        )?;
        let log_z = s.log_z;
        let f_demo = constraint.evaluate(&d.sample, &d.side)?;
        let log_p = match model.density(&d.context, &d.sample) {
            Some(lp) => lp?,
            None => 0.0,
        };
        acc.neg_log_z -= log_z;
        acc.kl_q_p += alpha * s.values[0] - log_z;
        acc.constraint_ll += log_p + alpha * f_demo - log_z;
        acc.z_hat += s.z;
        acc.ess += s.ess;
    }
    let k = eval.len() as f64;
    Ok(PrDiagnostics {
        neg_log_z: acc.neg_log_z / k,
        kl_q_p: acc.kl_q_p / k,
        constraint_ll: acc.constraint_ll / k,
        z_hat: acc.z_hat / k,
        ess: acc.ess / k,
    })
}

fn step(params: &ParamVector, velocity: &mut [f64], direction: &[f64], rate: f64, momentum: Option<f64>) -> Result<ParamVector> {
    match momentum {
        None => params.stepped(direction, rate),
        Some(mu) => {
            for (v, d) in velocity.iter_mut().zip(direction) {
                *v = mu * *v + d;
            }
            params.stepped(velocity, rate)
        }
    }
}

fn mean_into(acc: &mut [f64], v: &[f64], k: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x / k;
    }
}

/// Runs `config.iterations` iterations from scratch.
pub fn train<M, C, H>(
    config: &TrainConfig,
    model: M,
    constraint: C,
    demos: &DemonstrationSet<M::Sample, C::Side, M::Context>,
    hooks: &H,
) -> Result<TrainOutcome<M, C>>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample> + Clone,
    H: TrainHooks<M, C>,
{
    train_from(config, TrainState::fresh(model, constraint), demos, hooks)
}

/// Continues from `state` until `config.iterations` iterations are complete.
/// Randomness depends only on `(seed, iteration)`, so a resumed run repeats
/// the remaining iterations of an uninterrupted one exactly.
pub fn train_from<M, C, H>(
    config: &TrainConfig,
    mut state: TrainState<M, C>,
    demos: &DemonstrationSet<M::Sample, C::Side, M::Context>,
    hooks: &H,
) -> Result<TrainOutcome<M, C>>
where
    M: PrModel,
    C: ConstraintModel<Sample = M::Sample> + Clone,
    H: TrainHooks<M, C>,
{
    config.validate()?;
    let train = demos.train();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training demonstrations".into()));
    }
    let est = config.estimator();
    let root = StreamFamily::new(config.seed, "train");
    let diag_streams = StreamFamily::new(config.seed, "diagnostics");
    let original_streams = StreamFamily::new(config.seed, "original");
    let eval: Vec<_> = train.iter().copied().take(config.eval_instances.max(1)).collect();
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut last_metric = None;

    for t in state.iteration..config.iterations {
        let it = root.child("iter", t as u64);
        let batch: Vec<_> = {
            let mut rng = it.child("batch", 0).substream(0);
            let b = config.batch_size.min(train.len());
            let mut picked = index::sample(&mut rng, train.len(), b).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| train[i]).collect()
        };

        let (loss_original, grad_original) = state.model.original_objective(&train, config.distance, config.original_draws, &original_streams)?;
        let diag = match hooks.diagnostics(&state.model, &state.constraint, config.alpha) {
            Some(d) => d?,
            None => pr_diagnostics(&state.model, &state.constraint, config.alpha, &eval, &est, &diag_streams)?,
        };
        if t % config.metric_every == 0 || last_metric.is_none() {
            last_metric = Some(hooks.task_metric(&state.model, &state.constraint)?.unwrap_or(loss_original));
        }
        let record = TrainRecord {
            iteration: t + 1,
            loss_total: loss_original + config.lambda * diag.neg_log_z,
            loss_original,
            kl_q_p: diag.kl_q_p,
            constraint_ll: diag.constraint_ll,
            task_metric: last_metric.unwrap_or(loss_original),
            z_hat: diag.z_hat,
            ess: diag.ess,
            seconds: if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        record.check_finite()?;
        report.records.push(record);

        if config.selector.updates_constraint() {
            for s in 0..config.phi_steps {
                let streams = it.child("phi", s as u64);
                let mut g = match config.selector {
                    Selector::Full => constraint_grad_maxent(&batch, &state.model, &state.constraint, config.alpha, &est, &streams)?.0,
                    Selector::NaiveEq5 => constraint_grad_naive(&batch, &state.model, &state.constraint, config.alpha, &est, &streams)?.0,
                    Selector::GanStyle => constraint_grad_gan(&batch, &state.model, &state.constraint, config.alpha, &est, &streams)?,
                    _ => unreachable!("selector does not update the constraint"),
                }
                .values()
                .to_vec();
                mask_frozen(&mut g, state.constraint.params().layout(), &config.frozen_blocks);
                let phi = step(state.constraint.params(), &mut state.phi_velocity, &g, config.phi_rate, config.momentum)?;
                state.constraint = state.constraint.with_params(phi)?;
            }
        }

        for s in 0..config.theta_steps {
            let mut descent = if s == 0 {
                grad_original.clone()
            } else {
                state.model.original_objective(&train, config.distance, config.original_draws, &original_streams)?.1
            };
            if config.selector != Selector::BaseOnly && config.lambda > 0.0 {
                let streams = it.child("theta", s as u64);
                let k = batch.len() as f64;
                let mut dir = vec![0.0; descent.len()];
                for (i, d) in batch.iter().enumerate() {
                    let g =
                        state.model.pr_direction(&d.context, &state.constraint, &d.side, config.alpha, &est, &streams.child("instance", i as u64))?;
                    mean_into(&mut dir, &g, k);
                }
                for (a, b) in descent.iter_mut().zip(&dir) {
                    *a -= config.lambda * b;
                }
            }
            let theta = step(state.model.params(), &mut state.theta_velocity, &descent, -config.theta_rate, config.momentum)?;
            state.model = state.model.with_params(theta)?;
        }

        state.iteration = t + 1;
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if state.iteration % every == 0 {
                state.save(dir)?;
            }
        }
    }
    Ok(TrainOutcome { report, state })
}

#[cfg(test)]
mod tests;

//! Config-driven runs of the three tasks.
//!
//! A config names a task; every field it leaves out is taken from the
//! task's preset, so `{"task": "grid"}` is a complete config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::grid::{evaluation_noise, generate_grid_dataset, grid_metric, pretrain_classifier, GridDomain, GridHooks, GridMetric};
use super::infill::{
    generate_infill_dataset, infill_exact_match, infill_model, perplexity, InfillHooks, InfillMetric, MaskPolicy, MAX_LENGTH, MAX_VOCAB,
};
use crate::constraints::{FeatureMap, LinearFeatureConstraint, MatchingConstraint, PartConsistencyConstraint};
use crate::energy::EnergyDistribution;
use crate::error::{Error, Result};
use crate::model::{Activation, CategoricalModel, GenerativeModel, ImplicitPushforwardModel};
use crate::oracle::tv_distance_vec;
use crate::params::ParamVector;
use crate::rl_bridge::{
    correspondence_report, maxent_irl_fit, reps_estep, stationary_distribution, CorrespondenceInstance, CorrespondenceReport, IrlSchedule,
    PolicyTable, TabularMdp,
};
use crate::rng::StreamFamily;
use crate::trainer::{train, Demo, DemonstrationSet, EstimatorKind, NoHooks, Selector, Split, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Infill,
    Grid,
    MdpBridge,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Infill => "infill",
            Self::Grid => "grid",
            Self::MdpBridge => "mdp-bridge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    Perplexity,
    InfillExactMatch,
    GridSsimLite,
    GridPartConsistency,
}

impl MetricName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Perplexity => "perplexity",
            Self::InfillExactMatch => "infill-exact-match",
            Self::GridSsimLite => "grid-ssim-lite",
            Self::GridPartConsistency => "grid-part-consistency",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Self::Perplexity | Self::InfillExactMatch => Task::Infill,
            Self::GridSsimLite | Self::GridPartConsistency => Task::Grid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub name: MetricName,
    pub value: f64,
}

impl TaskMetric {
    pub fn new(name: MetricName, value: f64) -> Result<Self> {
        let ok = match name {
            MetricName::Perplexity => value >= 1.0 - 1e-12,
            MetricName::GridSsimLite => (-1.0..=1.0).contains(&value),
            MetricName::InfillExactMatch | MetricName::GridPartConsistency => (0.0..=1.0).contains(&value),
        };
        if !ok {
            return Err(Error::NonFinite(format!("{} = {value} outside its range", name.name())));
        }
        Ok(Self { name, value })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfillParams {
    pub vocab: usize,
    pub length: usize,
    pub mask: MaskPolicy,
    pub n_train: usize,
    pub n_test: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Standard deviation of the constraint's initial weights.
    pub init_scale: f64,
}

impl Default for InfillParams {
    fn default() -> Self {
        Self {
            vocab: 8,
            length: 6,
            mask: MaskPolicy::Spans { count: 1, min_len: 1, max_len: 3 },
            n_train: 5000,
            n_test: 1000,
            embed_dim: 4,
            hidden: 8,
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub height: usize,
    pub width: usize,
    pub parts: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_dim: usize,
    /// Half-width of the uniform initial feature weights.
    pub init_scale: f64,
    /// The classifier is pretrained on a domain whose part deviations are
    /// scaled by this factor.
    pub pretrain_factor: f64,
    pub pretrain_instances: usize,
    pub pretrain_steps: usize,
    pub pretrain_rate: f64,
    /// Fixed noise draws per test instance at evaluation.
    pub eval_draws: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            height: 12,
            width: 12,
            parts: 3,
            noise: 0.02,
            n_train: 500,
            n_test: 100,
            noise_dim: 2,
            init_scale: 0.05,
            pretrain_factor: 0.6,
            pretrain_instances: 50,
            pretrain_steps: 200,
            pretrain_rate: 1.0,
            eval_draws: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpBridgeParams {
    /// Inline MDP; when absent, `mdp_path` is read, and failing that a random
    /// MDP of the given size is drawn from the run seed.
    pub mdp: Option<TabularMdp>,
    pub mdp_path: Option<PathBuf>,
    pub states: usize,
    pub actions: usize,
    /// Base policy rows; uniform when absent.
    pub policy: Option<Vec<Vec<f64>>>,
    pub n_demos: usize,
}

impl Default for MdpBridgeParams {
    fn default() -> Self {
        Self { mdp: None, mdp_path: None, states: 3, actions: 2, policy: None, n_demos: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub selectors: Vec<Selector>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub train: TrainConfig,
    pub infill: InfillParams,
    pub grid: GridParams,
    pub mdp_bridge: MdpBridgeParams,
    pub out_dir: Option<PathBuf>,
    /// Metric tracked per iteration; the task default when absent.
    pub metric: Option<MetricName>,
    pub sweep: Sweep,
}

impl ExperimentConfig {
    /// Tuned defaults for a task.
    pub fn preset(task: Task) -> Self {
        let base = Self {
            task,
            train: TrainConfig::default(),
            infill: InfillParams::default(),
            grid: GridParams::default(),
            mdp_bridge: MdpBridgeParams::default(),
            out_dir: None,
            metric: None,
            sweep: Sweep { selectors: vec![Selector::Full], seeds: vec![0, 1, 2] },
        };
        match task {
            Task::Infill => Self {
                train: TrainConfig {
                    alpha: 2.0,
                    lambda: 2.0,
                    n_samples: 1000,
                    theta_rate: 0.5,
                    phi_rate: 10.0,
                    iterations: 150,
                    frozen_blocks: vec!["b2".into()],
                    ..TrainConfig::default()
                },
                sweep: Sweep { selectors: vec![Selector::BaseOnly, Selector::GanStyle, Selector::NaiveEq5, Selector::Full], seeds: vec![0, 1, 2] },
                ..base
            },
            Task::Grid => Self {
                train: TrainConfig {
                    alpha: 20.0,
                    lambda: 1.0,
                    n_samples: 100,
                    theta_rate: 0.5,
                    phi_rate: 0.5,
                    iterations: 60,
                    eval_instances: 8,
                    ..TrainConfig::default()
                },
                sweep: Sweep { selectors: vec![Selector::BaseOnly, Selector::FixedConstraint, Selector::Full], seeds: vec![0, 1, 2] },
                ..base
            },
            Task::MdpBridge => Self {
                train: TrainConfig {
                    alpha: 1.0,
                    theta_rate: 1.0,
                    phi_rate: 1.0,
                    iterations: 200,
                    batch_size: 64,
                    estimator: EstimatorKind::Exact,
                    eval_instances: 1,
                    ..TrainConfig::default()
                },
                ..base
            },
        }
    }

    /// Parses a JSON config, filling omitted fields from the task preset.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let task: Task = match user.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| Error::InvalidConfig(format!("task: {e}")))?,
            None => return Err(Error::InvalidConfig("config needs a \"task\" field".into())),
        };
        let mut merged = serde_json::to_value(Self::preset(task))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(m) = self.metric {
            if m.task() != self.task {
                return Err(Error::MetricMismatch { metric: m.name().into(), task: self.task.name().into() });
            }
        }
        if self.sweep.selectors.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one selector and one seed".into()));
        }
        match self.task {
            Task::Infill => {
                let p = &self.infill;
                if p.n_train == 0 || p.n_test == 0 || p.embed_dim == 0 || p.hidden == 0 {
                    return Err(Error::InvalidConfig("infill needs nonempty splits and positive embed_dim and hidden".into()));
                }
                if !(2..=MAX_VOCAB).contains(&p.vocab) || !(1..=MAX_LENGTH).contains(&p.length) {
                    return Err(Error::InvalidConfig(format!("infill needs 2 <= vocab <= {MAX_VOCAB} and 1 <= length <= {MAX_LENGTH}")));
                }
            }
            Task::Grid => {
                GridDomain::new(self.grid.height, self.grid.width, self.grid.parts, self.grid.noise)?;
                let p = &self.grid;
                if p.n_train == 0 || p.n_test == 0 || p.noise_dim == 0 || p.eval_draws == 0 || p.pretrain_instances == 0 {
                    return Err(Error::InvalidConfig("grid needs nonempty splits and positive noise_dim, eval_draws and pretrain_instances".into()));
                }
                if !(p.pretrain_factor > 0.0) {
                    return Err(Error::InvalidConfig("pretrain_factor must be positive".into()));
                }
            }
            Task::MdpBridge => {
                let p = &self.mdp_bridge;
                if p.n_demos == 0 {
                    return Err(Error::InvalidConfig("mdp-bridge needs demonstrations".into()));
                }
                if p.mdp.is_none() && p.mdp_path.is_none() && (p.states == 0 || p.actions == 0) {
                    return Err(Error::InvalidConfig("mdp-bridge needs an MDP or a positive size".into()));
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::InvalidConfig(format!("output directory {}: {e}", dir.display())))?;
        }
        Ok(())
    }

    fn default_metric(&self) -> Option<MetricName> {
        self.metric.or(match self.task {
            Task::Infill => Some(MetricName::Perplexity),
            Task::Grid => Some(MetricName::GridPartConsistency),
            Task::MdpBridge => None,
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// What one run writes next to its metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: Task,
    pub selector: Selector,
    pub seed: u64,
    pub final_metrics: BTreeMap<String, f64>,
    /// Seconds; present only when `record_wall_time` is on.
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub report: TrainReport,
    pub correspondence: Option<CorrespondenceReport>,
}

impl RunOutput {
    pub fn stem(&self) -> String {
        format!("{}-{}-seed{}", self.summary.task.name(), self.summary.selector.name(), self.summary.seed)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.summary.final_metrics.get(name).copied()
    }
}

/// Trains one variant and evaluates it on the test split.
pub fn run_single(cfg: &ExperimentConfig, selector: Selector, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let train_cfg = TrainConfig { selector, seed, ..cfg.train.clone() };
    let start = Instant::now();
    let (report, final_metrics, correspondence) = match cfg.task {
        Task::Infill => run_infill(cfg, &train_cfg)?,
        Task::Grid => run_grid(cfg, &train_cfg)?,
        Task::MdpBridge => run_mdp_bridge(cfg, &train_cfg)?,
    };
    let wall_time = train_cfg.record_wall_time.then(|| start.elapsed().as_secs_f64());
    Ok(RunOutput { summary: RunSummary { task: cfg.task, selector, seed, final_metrics, wall_time }, report, correspondence })
}

type Ran = (TrainReport, BTreeMap<String, f64>, Option<CorrespondenceReport>);

fn insert(metrics: &mut BTreeMap<String, f64>, m: TaskMetric) {
    metrics.insert(m.name.name().to_string(), m.value);
}

fn run_infill(cfg: &ExperimentConfig, train_cfg: &TrainConfig) -> Result<Ran> {
    let p = &cfg.infill;
    let seed = train_cfg.seed;
    let data = generate_infill_dataset(p.vocab, p.length, p.mask, p.n_train, p.n_test, seed)?;
    let model = infill_model(p.vocab, p.length)?;
    let constraint = MatchingConstraint::randomized(p.vocab, p.embed_dim, p.hidden, p.init_scale, &mut StreamFamily::new(seed, "init").substream(0))?;
    let test = data.test();
    let metric = match cfg.default_metric() {
        Some(MetricName::InfillExactMatch) => InfillMetric::ExactMatch,
        _ => InfillMetric::Perplexity,
    };
    let hooks = InfillHooks {
        test: test.clone(),
        eval: data.train().into_iter().take(train_cfg.eval_instances).collect(),
        metric,
        n_samples: train_cfg.n_samples,
    };
    let out = train(train_cfg, model, constraint, &data, &hooks)?;
    let mut metrics = BTreeMap::new();
    insert(&mut metrics, TaskMetric::new(MetricName::Perplexity, perplexity(&out.state.model, &test)?)?);
    if test.iter().any(|d| !d.side.spans.is_empty()) {
        insert(&mut metrics, TaskMetric::new(MetricName::InfillExactMatch, infill_exact_match(&out.state.model, &test)?)?);
    }
    Ok((out.report, metrics, None))
}

/// Pushforward generator with random feature weights and zero noise loadings.
pub fn grid_generator(p: &GridParams, seed: u64) -> Result<ImplicitPushforwardModel> {
    let base = ImplicitPushforwardModel::new(p.height, p.width, p.parts + 1, p.noise_dim, Activation::Sigmoid)?;
    let mut rng = StreamFamily::new(seed, "init").substream(0);
    let features = p.parts + 1;
    let values = (0..base.params().len()).map(|i| if i < features { 2.0 * p.init_scale * (rng.random::<f64>() - 0.5) } else { 0.0 }).collect();
    base.with_params(ParamVector::new(base.params().layout().clone(), values)?)
}

fn run_grid(cfg: &ExperimentConfig, train_cfg: &TrainConfig) -> Result<Ran> {
    let p = &cfg.grid;
    let seed = train_cfg.seed;
    let domain = GridDomain::new(p.height, p.width, p.parts, p.noise)?;
    let data = generate_grid_dataset(&domain, p.n_train, p.n_test, seed)?;
    let classifier = pretrain_classifier(&domain.scaled(p.pretrain_factor), p.pretrain_instances, p.pretrain_steps, p.pretrain_rate, seed)?;
    let model = grid_generator(p, seed)?;
    let test = data.demos.test();
    let noise = evaluation_noise(&model, p.eval_draws, seed);
    let metric = match cfg.default_metric() {
        Some(MetricName::GridSsimLite) => GridMetric::SsimLite,
        _ => GridMetric::PartConsistency,
    };
    let hooks = GridHooks { test: test.clone(), deviations: domain.deviations.clone(), noise: noise.clone(), metric };
    let out = train(train_cfg, model, PartConsistencyConstraint::new(classifier), &data.demos, &hooks)?;
    let mut metrics = BTreeMap::new();
    for (name, kind) in [(MetricName::GridPartConsistency, GridMetric::PartConsistency), (MetricName::GridSsimLite, GridMetric::SsimLite)] {
        insert(&mut metrics, TaskMetric::new(name, grid_metric(&out.state.model, &test, &domain.deviations, &noise, kind)?)?);
    }
    Ok((out.report, metrics, None))
}

/// Dense random MDP: every transition and action probability positive.
pub fn random_mdp(states: usize, actions: usize, seed: u64) -> Result<TabularMdp> {
    let mut rng = StreamFamily::new(seed, "mdp").substream(0);
    let mut row = |k: usize| {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let transitions = (0..states).map(|_| (0..actions).map(|_| row(states)).collect()).collect();
    let rewards = (0..states).map(|_| row(actions).into_iter().map(|v| 2.0 * v).collect()).collect();
    TabularMdp::new(transitions, rewards)
}

fn run_mdp_bridge(cfg: &ExperimentConfig, train_cfg: &TrainConfig) -> Result<Ran> {
    let p = &cfg.mdp_bridge;
    let seed = train_cfg.seed;
    let mdp = match (&p.mdp, &p.mdp_path) {
        (Some(m), _) => {
            m.validate()?;
            m.clone()
        }
        (None, Some(path)) => TabularMdp::load(path)?,
        (None, None) => random_mdp(p.states, p.actions, seed)?,
    };
    let policy = match &p.policy {
        Some(rows) => PolicyTable::new(rows.clone())?,
        None => PolicyTable::uniform(mdp.num_states, mdp.num_actions)?,
    };
    let alpha = train_cfg.alpha;
    let mu = stationary_distribution(&mdp, &policy)?;
    let p_joint = policy.joint(&mu)?;
    let rewards = mdp.reward_vector();
    let q_star = reps_estep(&p_joint, &rewards, alpha)?;
    let sampler = WeightedIndex::new(&q_star).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = StreamFamily::new(seed, "mdp-demos").substream(0);
    let demos: Vec<usize> = (0..p.n_demos).map(|_| sampler.sample(&mut rng)).collect();
    let k = p_joint.len();
    let mut empirical = vec![0.0; k];
    for x in &demos {
        empirical[*x] += 1.0 / demos.len() as f64;
    }

    let correspondence = correspondence_report(&CorrespondenceInstance { p_joint: p_joint.clone(), rewards, alpha, demos: demos.clone() })?;

    // PR view: base p_θ = μ^π π, constraint linear in one-hot features
    let set = DemonstrationSet::new(demos.iter().map(|x| Demo { sample: *x, side: (), context: (), split: Split::Train }).collect())?;
    let model = CategoricalModel::from_probs(&p_joint)?;
    let constraint: LinearFeatureConstraint<usize, ()> = LinearFeatureConstraint::zeros(FeatureMap::outcome_one_hot(k));
    let out = train(train_cfg, model, constraint, &set, &NoHooks)?;
    let q = EnergyDistribution::new_allowing_zero_alpha(&out.state.model, &(), &out.state.constraint, &(), alpha)?.exact_q(u64::MAX)?.probs;

    let one_hot: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("q-max-abs-deviation".to_string(), correspondence.q_max_abs_deviation);
    metrics.insert("pr-demo-tv".to_string(), tv_distance_vec(&q, &empirical));
    // all joint points need demo mass for the saturated fit to converge
    if empirical.iter().all(|v| *v > 0.0) {
        let fit = maxent_irl_fit(&demos, &one_hot, alpha, IrlSchedule::default())?;
        metrics.insert("irl-demo-tv".to_string(), tv_distance_vec(&fit.q, &empirical));
    }
    Ok((out.report, metrics, Some(correspondence)))
}

/// Runs the config's own selector and seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let out = run_single(cfg, cfg.train.selector, cfg.train.seed)?;
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, std::slice::from_ref(&out))?;
    }
    Ok(out)
}

/// Every (selector, seed) pair of the sweep, in order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    let mut outs = Vec::new();
    for selector in &cfg.sweep.selectors {
        for seed in &cfg.sweep.seeds {
            log::info!("{} {} seed {}", cfg.task.name(), selector.name(), seed);
            outs.push(run_single(cfg, *selector, *seed)?);
        }
    }
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &outs)?;
    }
    Ok(outs)
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)?)
}

/// `iteration` followed by one `loss_total` column per run.
pub fn plot_csv(runs: &[RunOutput]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string()];
    header.extend(runs.iter().map(|r| format!("{}-seed{}", r.summary.selector.name(), r.summary.seed)));
    w.write_record(&header)?;
    let rows = runs.iter().map(|r| r.report.records.len()).max().unwrap_or(0);
    for i in 0..rows {
        let mut rec = vec![(i + 1).to_string()];
        for r in runs {
            rec.push(r.report.records.get(i).map_or(String::new(), |x| x.loss_total.to_string()));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Metrics CSV, summary JSON (and the correspondence report) per run, plus
/// one plot-data CSV for the lot.
pub fn write_outputs(dir: &Path, runs: &[RunOutput]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in runs {
        let stem = r.stem();
        r.report.write_csv(dir.join(format!("{stem}.csv")))?;
        fs::write(dir.join(format!("{stem}.summary.json")), summary_json(&r.summary)?)?;
        if let Some(c) = &r.correspondence {
            fs::write(dir.join(format!("{stem}.correspondence.json")), c.to_json()?)?;
        }
    }
    if let Some(first) = runs.first() {
        fs::write(dir.join(format!("{}-plot.csv", first.summary.task.name())), plot_csv(runs)?)?;
    }
    Ok(())
}

/// Reads every `*.summary.json` under `dir`.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".summary.json")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
}

/// Per-task tables of final metrics: one row per selector, one column per
/// seed and metric.
pub fn format_report(summaries: &[RunSummary]) -> String {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry((s.task.name(), s.selector.name())).or_default().push(s);
    }
    let mut out = String::new();
    let mut last_task = "";
    for ((task, selector), runs) in groups {
        if task != last_task {
            out.push_str(&format!("{task}\n"));
            last_task = task;
        }
        let mut names: Vec<&String> = runs.iter().flat_map(|r| r.final_metrics.keys()).collect();
        names.sort();
        names.dedup();
        for name in names {
            let vals: Vec<String> =
                runs.iter().map(|r| r.final_metrics.get(name).map_or("-".to_string(), |v| format!("s{}={v:.4}", r.seed))).collect();
            let present: Vec<f64> = runs.iter().filter_map(|r| r.final_metrics.get(name)).copied().collect();
            let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
            out.push_str(&format!("  {selector:<17} {name:<22} mean {mean:.4}  {}\n", vals.join(" ")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(task);
        cfg.train.iterations = 3;
        cfg.train.n_samples = 100;
        cfg.train.batch_size = 4;
        cfg.train.eval_instances = 2;
        cfg.infill.n_train = 50;
        cfg.infill.n_test = 20;
        cfg.grid.n_train = 10;
        cfg.grid.n_test = 4;
        cfg.grid.height = 6;
        cfg.grid.width = 6;
        cfg.grid.parts = 2;
        cfg.grid.pretrain_instances = 4;
        cfg.grid.pretrain_steps = 5;
        cfg.mdp_bridge.n_demos = 200;
        cfg
    }

    #[test]
    fn partial_json_fills_from_preset() {
        let cfg = ExperimentConfig::from_json_str(r#"{"task": "grid", "train": {"iterations": 7}, "grid": {"parts": 2}}"#).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.alpha, ExperimentConfig::preset(Task::Grid).train.alpha);
        assert_eq!(cfg.grid.parts, 2);
        assert_eq!(cfg.grid.height, 12);
    }

    #[test]
    fn bad_configs_rejected() {
        for text in [
            r#"{"train": {}}"#,
            r#"{"task": "poetry"}"#,
            r#"{"task": "grid", "unknown": 1}"#,
            r#"{"task": "grid", "grid": {"noise": 0.5}}"#,
            r#"{"task": "grid", "metric": "perplexity"}"#,
            r#"{"task": "infill", "train": {"alpha": -1}}"#,
            r#"{"task": "infill", "infill": {"vocab": 1}}"#,
            r#"{"task": "infill", "infill": {"length": 9}}"#,
            "not json",
        ] {
            assert!(ExperimentConfig::from_json_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn metric_ranges_enforced() {
        assert!(TaskMetric::new(MetricName::Perplexity, 0.5).is_err());
        assert!(TaskMetric::new(MetricName::GridSsimLite, 1.5).is_err());
        assert!(TaskMetric::new(MetricName::GridSsimLite, -0.5).is_ok());
        assert!(TaskMetric::new(MetricName::Perplexity, f64::NAN).is_err());
    }

    #[test]
    fn runs_are_reproducible_and_write_outputs() {
        for task in [Task::Infill, Task::Grid, Task::MdpBridge] {
            let cfg = tiny(task);
            let a = run_single(&cfg, Selector::Full, 1).unwrap();
            let b = run_single(&cfg, Selector::Full, 1).unwrap();
            assert_eq!(a.report.to_csv_string().unwrap(), b.report.to_csv_string().unwrap());
            assert_eq!(summary_json(&a.summary).unwrap(), summary_json(&b.summary).unwrap());
            assert_eq!(a.report.records.len(), 3);
            assert!(a.summary.wall_time.is_none());

            let dir = tempfile::tempdir().unwrap();
            write_outputs(dir.path(), std::slice::from_ref(&a)).unwrap();
            let stem = a.stem();
            assert!(dir.path().join(format!("{stem}.csv")).exists());
            assert!(dir.path().join(format!("{}-plot.csv", task.name())).exists());
            assert_eq!(load_summaries(dir.path()).unwrap(), vec![a.summary.clone()]);
            assert!(format_report(&[a.summary]).contains(task.name()));
        }
    }

    #[test]
    fn mdp_bridge_metrics() {
        let out = run_single(&tiny(Task::MdpBridge), Selector::Full, 0).unwrap();
        assert!(out.metric("q-max-abs-deviation").unwrap() < 1e-12);
        assert!(out.metric("irl-demo-tv").unwrap() < 1e-3);
        assert!(out.correspondence.unwrap().q_columns_agree);
    }

    #[test]
    fn plot_csv_has_one_column_per_run() {
        let cfg = tiny(Task::MdpBridge);
        let runs: Vec<RunOutput> = [Selector::Full, Selector::BaseOnly].iter().map(|s| run_single(&cfg, *s, 0).unwrap()).collect();
        let text = plot_csv(&runs).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,full-seed0,base-only-seed0");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn wall_time_only_on_request() {
        let mut cfg = tiny(Task::MdpBridge);
        cfg.train.record_wall_time = true;
        assert!(run_single(&cfg, Selector::Full, 0).unwrap().summary.wall_time.is_some());
    }
}

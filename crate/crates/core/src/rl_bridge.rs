//! Tabular entropy-regularized policy search and MaxEnt inverse RL on the
//! joint state-action space `x = (s, a)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintModel, FeatureMap, LinearFeatureConstraint};
use crate::energy::EnergyDistribution;
use crate::error::{Error, Result};
use crate::model::CategoricalModel;
use crate::numeric::log_sum_exp;

const ROW_TOLERANCE: f64 = 1e-12;
const POWER_TOLERANCE: f64 = 1e-12;
const POWER_MAX_ITERATIONS: usize = 100_000;
const RESIDUAL_TOLERANCE: f64 = 1e-10;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::NotADistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Finite MDP with `transitions[s][a][s']` and `rewards[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = transitions.len();
        let num_actions = transitions.first().map_or(0, Vec::len);
        let mdp = Self { num_states, num_actions, transitions, rewards };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidArgument("MDP needs at least one state and one action".into()));
        }
        if self.transitions.len() != ns {
            return Err(Error::DimensionMismatch { expected: ns, got: self.transitions.len() });
        }
        if self.rewards.len() != ns {
            return Err(Error::DimensionMismatch { expected: ns, got: self.rewards.len() });
        }
        for (s, (rows, r)) in self.transitions.iter().zip(&self.rewards).enumerate() {
            if rows.len() != na {
                return Err(Error::DimensionMismatch { expected: na, got: rows.len() });
            }
            if r.len() != na {
                return Err(Error::DimensionMismatch { expected: na, got: r.len() });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reward in state {s}")));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::DimensionMismatch { expected: ns, got: row.len() });
                }
                check_row(row, &format!("P(.|{s},{a})"))?;
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn joint_size(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn joint_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// `R` flattened in joint order.
    pub fn reward_vector(&self) -> Vec<f64> {
        self.rewards.iter().flatten().copied().collect()
    }

    /// State-to-state kernel `P_π(s'|s) = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_kernel(&self, policy: &PolicyTable) -> Result<Vec<Vec<f64>>> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::DimensionMismatch { expected: self.joint_size(), got: policy.num_states() * policy.num_actions() });
        }
        Ok((0..self.num_states)
            .map(|s| {
                let mut row = vec![0.0; self.num_states];
                for (a, pa) in policy.probs[s].iter().enumerate() {
                    for (acc, t) in row.iter_mut().zip(&self.transitions[s][a]) {
                        *acc += pa * t;
                    }
                }
                row
            })
            .collect())
    }
}

/// `π(a|s)` as a row-stochastic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let width = probs.first().map_or(0, Vec::len);
        if probs.is_empty() || width == 0 {
            return Err(Error::InvalidArgument("empty policy table".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.len() != width {
                return Err(Error::DimensionMismatch { expected: width, got: row.len() });
            }
            check_row(row, &format!("π(.|{s})"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / num_actions as f64; num_actions]; num_states])
    }

    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// `p_π(s, a) = μ(s) π(a|s)` in joint order.
    pub fn joint(&self, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.num_states() {
            return Err(Error::DimensionMismatch { expected: self.num_states(), got: mu.len() });
        }
        Ok(self.probs.iter().zip(mu).flat_map(|(row, m)| row.iter().map(move |p| m * p)).collect())
    }
}

fn reachable(kernel: &[Vec<f64>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; kernel.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(s) = stack.pop() {
        for (t, p) in kernel[s].iter().enumerate() {
            if *p > 0.0 && !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        }
    }
    seen
}

/// Errors unless the chain has exactly one recurrent class.
fn check_single_recurrent_class(kernel: &[Vec<f64>]) -> Result<()> {
    let n = kernel.len();
    let reach: Vec<Vec<bool>> = (0..n).map(|s| reachable(kernel, s)).collect();
    let recurrent: Vec<usize> = (0..n).filter(|&s| (0..n).all(|t| !reach[s][t] || reach[t][s])).collect();
    let first = recurrent[0];
    if let Some(other) = recurrent.iter().find(|&&s| !reach[first][s]) {
        return Err(Error::NonErgodic(format!("states {first} and {other} lie in different recurrent classes")));
    }
    Ok(())
}

/// Stationary state distribution `μ^π` with `μ P_π = μ`.
///
/// Runs power iteration on the lazy kernel `(I + P_π)/2`, which shares the
/// fixed point and converges for periodic chains too.
pub fn stationary_distribution(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    let kernel = mdp.state_kernel(policy)?;
    check_single_recurrent_class(&kernel)?;
    let n = kernel.len();
    let step = |mu: &[f64]| {
        let mut next = vec![0.0; n];
        for (m, row) in mu.iter().zip(&kernel) {
            for (acc, p) in next.iter_mut().zip(row) {
                *acc += m * p;
            }
        }
        next
    };
    let mut mu = vec![1.0 / n as f64; n];
    for _ in 0..POWER_MAX_ITERATIONS {
        let moved = step(&mu);
        let next: Vec<f64> = mu.iter().zip(&moved).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        let total: f64 = next.iter().sum();
        mu = next.into_iter().map(|v| v / total).collect();
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    let residual: f64 = step(&mu).iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
    if residual > RESIDUAL_TOLERANCE {
        return Err(Error::NonConvergence(format!("stationary residual {residual:e}")));
    }
    Ok(mu)
}

/// `q*(x) ∝ p(x) exp(α R(x))` over the joint space.
pub fn reps_estep(p_joint: &[f64], rewards: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p_joint.len() != rewards.len() {
        return Err(Error::DimensionMismatch { expected: p_joint.len(), got: rewards.len() });
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let sum: f64 = p_joint.iter().sum();
    if p_joint.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotADistribution(format!("joint mass {sum}")));
    }
    let log_u: Vec<f64> =
        p_joint.iter().zip(rewards).map(|(p, r)| if *p > 0.0 && r.is_finite() { p.ln() + alpha * r } else { f64::NEG_INFINITY }).collect();
    let log_z = log_sum_exp(&log_u);
    if !log_z.is_finite() {
        return Err(Error::DegenerateWeights("no joint element with positive mass and finite reward".into()));
    }
    Ok(log_u.iter().map(|l| (l - log_z).exp()).collect())
}

/// Tabular policy closest in KL to `q*`: `π(a|s) ∝ q*(s, a)`.
///
/// States with no mass get a uniform row.
pub fn reps_mstep(q_star: &[f64], num_states: usize, num_actions: usize) -> Result<PolicyTable> {
    if q_star.len() != num_states * num_actions {
        return Err(Error::DimensionMismatch { expected: num_states * num_actions, got: q_star.len() });
    }
    if q_star.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NotADistribution("negative mass".into()));
    }
    let rows = q_star
        .chunks(num_actions)
        .map(|row| {
            let mass: f64 = row.iter().sum();
            if mass > 0.0 {
                let mut r: Vec<f64> = row.iter().map(|v| v / mass).collect();
                // absorb rounding so the row passes the stochasticity check
                let drift = 1.0 - r.iter().sum::<f64>();
                let top = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0);
                r[top] += drift;
                r
            } else {
                vec![1.0 / num_actions as f64; num_actions]
            }
        })
        .collect();
    PolicyTable::new(rows)
}

/// Gradient-ascent settings for [`maxent_irl_fit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlSchedule {
    pub rate: f64,
    pub max_steps: usize,
    /// Converged once `max |ψ̄_demo − E_q ψ| ≤ tolerance`.
    pub tolerance: f64,
}

impl Default for IrlSchedule {
    fn default() -> Self {
        Self { rate: 1.0, max_steps: 10_000, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlFit {
    pub phi: Vec<f64>,
    pub q: Vec<f64>,
    pub steps: usize,
    pub mismatch: f64,
}

/// Fits `q_φ(x) = exp(α φ·ψ(x)) / Z_φ` to demonstrations (joint indices) by
/// exact gradient ascent on the mean log-likelihood.
///
/// `features[x]` is `ψ(x)`.
pub fn maxent_irl_fit(demos: &[usize], features: &[Vec<f64>], alpha: f64, schedule: IrlSchedule) -> Result<IrlFit> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("no demonstrations".into()));
    }
    let k = features.len();
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || d > k {
        return Err(Error::InvalidArgument(format!("feature dimension {d} must be in 1..={k}")));
    }
    if let Some(row) = features.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: row.len() });
    }
    if let Some(x) = demos.iter().find(|x| **x >= k) {
        return Err(Error::OutOfSpace(format!("joint index {x} of {k}")));
    }
    if !(alpha > 0.0) || !(schedule.rate > 0.0) {
        return Err(Error::InvalidArgument("alpha and rate must be positive".into()));
    }
    let mut target = vec![0.0; d];
    for x in demos {
        for (t, v) in target.iter_mut().zip(&features[*x]) {
            *t += v / demos.len() as f64;
        }
    }
    let model_q = |phi: &[f64]| {
        let log_u: Vec<f64> = features.iter().map(|psi| alpha * psi.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>()).collect();
        let log_z = log_sum_exp(&log_u);
        log_u.iter().map(|l| (l - log_z).exp()).collect::<Vec<f64>>()
    };
    let mut phi = vec![0.0; d];
    for step in 0..=schedule.max_steps {
        let q = model_q(&phi);
        let mut expected = vec![0.0; d];
        for (qx, psi) in q.iter().zip(features) {
            for (e, v) in expected.iter_mut().zip(psi) {
                *e += qx * v;
            }
        }
        let grad: Vec<f64> = target.iter().zip(&expected).map(|(t, e)| t - e).collect();
        let mismatch = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !mismatch.is_finite() {
            return Err(Error::NonFinite("MaxEnt IRL gradient".into()));
        }
        if mismatch <= schedule.tolerance {
            return Ok(IrlFit { phi, q, steps: step, mismatch });
        }
        if step == schedule.max_steps {
            return Err(Error::NonConvergence(format!("feature mismatch {mismatch:e} after {step} steps")));
        }
        for (p, g) in phi.iter_mut().zip(&grad) {
            *p += schedule.rate * alpha * g;
        }
    }
    unreachable!("loop returns on its last step")
}

/// One shared instance viewed both as PR and as entropy-regularized RL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceInstance {
    pub p_joint: Vec<f64>,
    pub rewards: Vec<f64>,
    pub alpha: f64,
    pub demos: Vec<usize>,
}

impl CorrespondenceInstance {
    /// Base distribution `μ^π(s) π(a|s)` and rewards taken from an MDP.
    pub fn from_mdp(mdp: &TabularMdp, policy: &PolicyTable, alpha: f64, demos: Vec<usize>) -> Result<Self> {
        let mu = stationary_distribution(mdp, policy)?;
        Ok(Self { p_joint: policy.joint(&mu)?, rewards: mdp.reward_vector(), alpha, demos })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrColumns {
    pub p_theta: Vec<f64>,
    pub f_phi: Vec<f64>,
    pub q: Vec<f64>,
    pub demonstrations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlColumns {
    pub p_pi: Vec<f64>,
    pub reward: Vec<f64>,
    pub q_star_pi: Vec<f64>,
    pub demonstrations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub alpha: f64,
    pub pr: PrColumns,
    pub rl: RlColumns,
    pub q_max_abs_deviation: f64,
    pub q_columns_agree: bool,
}

impl CorrespondenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Computes `q` through the PR energy path and `q*_π` through the REPS path
/// and records how far apart they are.
pub fn correspondence_report(instance: &CorrespondenceInstance) -> Result<CorrespondenceReport> {
    let rl_q = reps_estep(&instance.p_joint, &instance.rewards, instance.alpha)?;

    let model = CategoricalModel::from_probs(&instance.p_joint)?;
    let table: Vec<Vec<f64>> = instance.rewards.iter().map(|r| vec![*r]).collect();
    let f: LinearFeatureConstraint<usize, ()> = LinearFeatureConstraint::new(FeatureMap::outcome_table("reward", table)?, vec![1.0])?;
    let pr_q = EnergyDistribution::new(&model, &(), &f, &(), instance.alpha)?.exact_q(u64::MAX)?.probs;
    let f_phi = (0..instance.rewards.len()).map(|x| f.evaluate(&x, &())).collect::<Result<Vec<_>>>()?;

    let deviation = pr_q.iter().zip(&rl_q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(CorrespondenceReport {
        alpha: instance.alpha,
        pr: PrColumns { p_theta: model.probs(), f_phi, q: pr_q, demonstrations: instance.demos.clone() },
        rl: RlColumns { p_pi: instance.p_joint.clone(), reward: instance.rewards.clone(), q_star_pi: rl_q, demonstrations: instance.demos.clone() },
        q_max_abs_deviation: deviation,
        q_columns_agree: deviation <= 1e-12,
    })
}

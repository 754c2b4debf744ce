use super::*;
use crate::constraints::{FeatureMap, LinearFeatureConstraint, WeightedSum};
use crate::energy::EnergyDistribution;
use crate::model::{CategoricalModel, CellFeatures, ExplicitModel, Grid, ImplicitModel, ImplicitPushforwardModel};
use crate::oracle::{exact_kl, finite_diff_grad, FiniteDistribution};
use crate::params::Layout;
use crate::rng::stream;
use rand::Rng;

type Lin = LinearFeatureConstraint<usize, ()>;
type CatDemo = Demo<usize, (), ()>;

fn demo(x: usize) -> CatDemo {
    Demo { sample: x, side: (), context: (), split: Split::Train }
}

fn exact() -> Estimator {
    Estimator::Exact { cap: 1 << 20 }
}

fn identity(phi: f64) -> Lin {
    Lin::new(FeatureMap::outcome_identity(), vec![phi]).unwrap()
}

/// `f(x, s) = −w · Σ (x − s)²`, differentiable in the grid.
#[derive(Clone, Debug)]
struct Quadratic {
    params: ParamVector,
}

impl Quadratic {
    fn new(w: f64) -> Self {
        Self { params: ParamVector::new(Layout::contiguous([("w", 1)]), vec![w]).unwrap() }
    }
}

impl ConstraintModel for Quadratic {
    type Sample = Grid;
    type Side = Grid;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        Ok(Self { params })
    }

    fn evaluate(&self, x: &Grid, s: &Grid) -> Result<f64> {
        Ok(-self.params.values()[0] * x.values.iter().zip(&s.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn accumulate_grad_params(&self, x: &Grid, s: &Grid, scale: f64, acc: &mut [f64]) -> Result<()> {
        acc[0] -= scale * x.values.iter().zip(&s.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Ok(())
    }

    fn grad_sample(&self, x: &Grid, s: &Grid) -> Result<Vec<f64>> {
        Ok(x.values.iter().zip(&s.values).map(|(a, b)| -2.0 * self.params.values()[0] * (a - b)).collect())
    }
}

#[test]
fn maxent_gradient_standard_instance() {
    let p = CategoricalModel::from_probs(&[0.5, 0.5]).unwrap();
    let f = identity(2f64.ln());
    let demos = [demo(0), demo(1)];
    let refs: Vec<&CatDemo> = demos.iter().collect();
    let (g, _) = constraint_grad_maxent(&refs, &p, &f, 1.0, &exact(), &StreamFamily::new(0, "g")).unwrap();
    assert!((g.values()[0] + 1.0 / 6.0).abs() < 1e-12);

    let gan = constraint_grad_gan(&refs, &p, &f, 1.0, &exact(), &StreamFamily::new(0, "g")).unwrap();
    assert!(gan.values()[0].abs() < 1e-12);
}

#[test]
fn gan_gradient_by_hand() {
    let p = CategoricalModel::from_probs(&[0.5, 0.5]).unwrap();
    let f = identity(0.3);
    let demos: Vec<CatDemo> = (0..10).map(|i| demo(usize::from(i < 9))).collect();
    let refs: Vec<&CatDemo> = demos.iter().collect();
    let g = constraint_grad_gan(&refs, &p, &f, 2.0, &exact(), &StreamFamily::new(0, "g")).unwrap();
    assert!((g.values()[0] - 0.8).abs() < 1e-12);
}

#[test]
fn maxent_gradient_vanishes_on_q_distributed_demos() {
    let p = CategoricalModel::from_logits(vec![0.2, -0.4, 1.0, 0.0]).unwrap();
    let f = Lin::new(FeatureMap::outcome_one_hot(4), vec![0.5, -1.0, 0.3, 0.9]).unwrap();
    let q = EnergyDistribution::new(&p, &(), &f, &(), 1.0).unwrap().exact_q(100).unwrap();
    // demo counts proportional to q, rounded
    let mut demos = Vec::new();
    for (x, qx) in q.probs.iter().enumerate() {
        for _ in 0..(qx * 100_000.0).round() as usize {
            demos.push(demo(x));
        }
    }
    let refs: Vec<&CatDemo> = demos.iter().collect();
    let (g, _) = constraint_grad_maxent(&refs, &p, &f, 1.0, &exact(), &StreamFamily::new(0, "g")).unwrap();
    assert!(g.values().iter().all(|v| v.abs() < 1e-4), "{:?}", g.values());
}

/// `E_{p_d}[log q_φ]` by enumeration.
fn exact_constraint_ll(p: &CategoricalModel, f: &Lin, alpha: f64, demos: &[CatDemo]) -> f64 {
    let t = EnergyDistribution::new(p, &(), f, &(), alpha).unwrap().exact_q(100).unwrap();
    demos.iter().map(|d| t.probs[d.sample].ln()).sum::<f64>() / demos.len() as f64
}

#[test]
fn maxent_gradient_matches_finite_differences_of_exact_likelihood() {
    let mut rng = stream(5, "maxent-fd", 0);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let phi: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = CategoricalModel::from_logits(logits).unwrap();
        let f = Lin::new(FeatureMap::outcome_one_hot(8), phi.clone()).unwrap();
        let demos: Vec<CatDemo> = (0..30).map(|_| demo(rng.random_range(0..8))).collect();
        let refs: Vec<&CatDemo> = demos.iter().collect();
        let (g, _) = constraint_grad_maxent(&refs, &p, &f, 1.3, &exact(), &StreamFamily::new(0, "g")).unwrap();
        let fd = finite_diff_grad(|th: &[f64]| exact_constraint_ll(&p, &identity_like(&f, th), 1.3, &demos), &phi, 1e-5).unwrap();
        for (a, b) in g.values().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

fn identity_like(f: &Lin, th: &[f64]) -> Lin {
    f.with_params(ParamVector::new(f.params().layout().clone(), th.to_vec()).unwrap()).unwrap()
}

#[test]
fn naive_gradient_matches_finite_differences_of_exact_expectation() {
    let p = CategoricalModel::from_logits(vec![0.3, -0.2, 0.8, 0.0, -1.0]).unwrap();
    let phi = vec![0.4, -0.7, 0.1, 0.9, 0.2];
    let f = Lin::new(FeatureMap::outcome_one_hot(5), phi.clone()).unwrap();
    let refs = [&demo(0)];
    let (g, _) = constraint_grad_naive(&refs, &p, &f, 1.5, &exact(), &StreamFamily::new(0, "n")).unwrap();
    let e_q_f = |th: &[f64]| {
        let f = identity_like(&f, th);
        let t = EnergyDistribution::new(&p, &(), &f, &(), 1.5).unwrap().exact_q(100).unwrap();
        t.probs.iter().zip(&t.f).map(|(q, fx)| q * fx).sum::<f64>()
    };
    let fd = finite_diff_grad(e_q_f, &phi, 1e-5).unwrap();
    for (a, b) in g.values().iter().zip(&fd) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn naive_gradient_with_zero_constraint_is_mean_feature() {
    let p = CategoricalModel::from_logits(vec![0.3, -0.2, 0.8]).unwrap();
    let f = Lin::zeros(FeatureMap::outcome_one_hot(3));
    let (g, _) = constraint_grad_naive(&[&demo(1)], &p, &f, 1.0, &exact(), &StreamFamily::new(0, "n")).unwrap();
    for (a, b) in g.values().iter().zip(p.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn frozen_blocks_get_no_update() {
    let p = CategoricalModel::from_logits(vec![0.3, -0.2, 0.8]).unwrap();
    let f = WeightedSum::new(vec![(1.0, Lin::new(FeatureMap::outcome_one_hot(3), vec![0.1, 0.2, 0.3]).unwrap()), (0.5, identity(0.7))]).unwrap();
    let (g, _) = constraint_grad_naive(&[&demo(1)], &p, &f, 1.0, &exact(), &StreamFamily::new(0, "n")).unwrap();
    let mut v = g.values().to_vec();
    mask_frozen(&mut v, f.params().layout(), &["m1.weights".to_string()]);
    assert_eq!(v[3], 0.0);
    assert!(v[..3].iter().all(|x| *x != 0.0));
}

#[test]
fn mstep_at_q_equal_p_is_zero() {
    let p = CategoricalModel::from_logits(vec![0.3, -0.2, 0.8, 1.1]).unwrap();
    let f = Lin::zeros(FeatureMap::outcome_one_hot(4));
    let g = mstep_explicit(&p, &(), &f, &(), 1.0, &exact(), &StreamFamily::new(0, "m")).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn mstep_sampled_matches_exact_and_reduces_kl() {
    let p = CategoricalModel::from_probs(&[0.5, 0.5]).unwrap();
    let f = identity(2f64.ln());
    let exact_g = mstep_explicit(&p, &(), &f, &(), 1.0, &exact(), &StreamFamily::new(0, "m")).unwrap();
    // (q − p) on the logits
    assert!((exact_g[1] - (2.0 / 3.0 - 0.5)).abs() < 1e-12);
    // relative sd of the estimate is about 0.85% at this n
    let mut close = 0;
    for seed in 0..40 {
        let is_g = mstep_explicit(&p, &(), &f, &(), 1.0, &Estimator::sampled(100_000), &StreamFamily::new(seed, "m")).unwrap();
        let rel = (is_g[1] - exact_g[1]).abs() / exact_g[1].abs();
        assert!(rel < 0.05, "seed {seed}: {rel}");
        close += usize::from(rel <= 0.01);
    }
    assert!(close >= 24, "{close}/40 within 1%");
    let q = FiniteDistribution::indexed(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let kl = |m: &CategoricalModel| exact_kl(&q, &FiniteDistribution::indexed(m.probs()).unwrap()).unwrap().finite().unwrap();
    let moved = p.with_params(p.params().stepped(&exact_g, 0.1).unwrap()).unwrap();
    assert!(kl(&moved) < kl(&p));
}

#[test]
fn original_objective_gradients() {
    let p = CategoricalModel::uniform(2).unwrap();
    let (loss, g) = p.original_objective(&[&demo(0)], DistanceKind::Squared, 1, &StreamFamily::new(0, "o")).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);

    let mle = CategoricalModel::from_probs(&[0.25, 0.75]).unwrap();
    let demos = [demo(0), demo(1), demo(1), demo(1)];
    let refs: Vec<&CatDemo> = demos.iter().collect();
    let (_, g) = mle.original_objective(&refs, DistanceKind::Squared, 1, &StreamFamily::new(0, "o")).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-15));
}

fn rig_demo(target: f64) -> Demo<Grid, Grid, CellFeatures> {
    let t = Grid::new(1, 1, vec![target]).unwrap();
    Demo { sample: t.clone(), side: t, context: CellFeatures::constant(1, 1), split: Split::Train }
}

#[test]
fn implicit_original_objective_vanishes_when_generation_is_exact() {
    let m = ImplicitPushforwardModel::affine_scalar(0.4, 0.0);
    let d = rig_demo(0.4);
    for kind in [DistanceKind::Squared, DistanceKind::L1] {
        let (loss, g) = m.original_objective(&[&d], kind, 8, &StreamFamily::new(0, "o")).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn implicit_gradient_is_zero_for_constant_or_maximized_constraint() {
    let ctx = CellFeatures::constant(1, 1);
    let m = ImplicitPushforwardModel::affine_scalar(0.4, 1.0);
    let flat = Quadratic::new(0.0);
    let target = Grid::new(1, 1, vec![0.4]).unwrap();
    let g = mstep_implicit(&m, &ctx, &flat, &target, 1.0, 500, ChunkPlan::default(), &StreamFamily::new(0, "i")).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));

    let exact_gen = ImplicitPushforwardModel::affine_scalar(0.4, 0.0);
    let g = mstep_implicit(&exact_gen, &ctx, &Quadratic::new(1.0), &target, 1.0, 500, ChunkPlan::default(), &StreamFamily::new(0, "i")).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn pathwise_gradient_matches_finite_differences_with_common_noise() {
    let ctx = CellFeatures::constant(1, 1);
    let f = Quadratic::new(0.7);
    let target = Grid::new(1, 1, vec![0.25]).unwrap();
    let m = ImplicitPushforwardModel::affine_scalar(-0.3, 1.4);
    let mut rng = stream(2, "crn", 0);
    let noise: Vec<Vec<f64>> = (0..2000).map(|_| m.draw_noise(&mut rng)).collect();
    let g = pathwise_gradient(&m, &ctx, &f, &target, 2.0, &noise).unwrap();
    let objective = |th: &[f64]| {
        let mm = m.with_params(ParamVector::new(m.params().layout().clone(), th.to_vec()).unwrap()).unwrap();
        noise.iter().map(|z| 2.0 * f.evaluate(&mm.push(&ctx, z), &target).unwrap()).sum::<f64>() / noise.len() as f64
    };
    let fd = finite_diff_grad(objective, m.params().values(), 1e-5).unwrap();
    for (a, b) in g.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

fn cat_set(xs: &[usize]) -> DemonstrationSet<usize, (), ()> {
    DemonstrationSet::new(xs.iter().map(|x| demo(*x)).collect()).unwrap()
}

fn small_config(selector: Selector) -> TrainConfig {
    TrainConfig { iterations: 15, n_samples: 500, batch_size: 4, selector, seed: 3, ..Default::default() }
}

#[test]
fn base_only_never_moves_constraint() {
    let demos = cat_set(&[0, 1, 1, 2, 2, 2]);
    let f = Lin::new(FeatureMap::outcome_one_hot(3), vec![0.1, 0.2, -0.3]).unwrap();
    let before = f.params().checksum();
    let out = train(&small_config(Selector::BaseOnly), CategoricalModel::uniform(3).unwrap(), f, &demos, &NoHooks).unwrap();
    assert_eq!(out.state.constraint.params().checksum(), before);
    assert_eq!(out.report.records.len(), 15);

    let f = Lin::new(FeatureMap::outcome_one_hot(3), vec![0.1, 0.2, -0.3]).unwrap();
    let out = train(&small_config(Selector::Full), CategoricalModel::uniform(3).unwrap(), f, &demos, &NoHooks).unwrap();
    assert_ne!(out.state.constraint.params().checksum(), before);
}

#[test]
fn zero_lambda_reduces_theta_updates_to_original_objective() {
    let demos = cat_set(&[0, 1, 1, 2, 2, 2]);
    let f = Lin::new(FeatureMap::outcome_one_hot(3), vec![0.1, 0.2, -0.3]).unwrap();
    let cfg = TrainConfig { lambda: 0.0, iterations: 1, ..small_config(Selector::Full) };
    let p = CategoricalModel::from_logits(vec![0.5, 0.0, -0.5]).unwrap();
    let out = train(&cfg, p.clone(), f, &demos, &NoHooks).unwrap();
    let (_, g) = p.original_objective(&demos.train(), DistanceKind::Squared, 1, &StreamFamily::new(0, "o")).unwrap();
    let expected = p.params().stepped(&g, -cfg.theta_rate).unwrap();
    assert_eq!(out.state.model.params(), &expected);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let demos = cat_set(&[0, 1, 1, 2, 2, 2, 3]);
    let f = Lin::new(FeatureMap::outcome_one_hot(4), vec![0.0; 4]).unwrap();
    let p = CategoricalModel::uniform(4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: Some(5),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        momentum: Some(0.5),
        ..small_config(Selector::Full)
    };
    let a = train(&cfg, p.clone(), f.clone(), &demos, &NoHooks).unwrap();
    let b = train(&cfg, p.clone(), f.clone(), &demos, &NoHooks).unwrap();
    assert_eq!(a.report.to_csv_string().unwrap(), b.report.to_csv_string().unwrap());

    let state = TrainState::load(dir.path(), 10, &p, &f).unwrap();
    let resumed = train_from(&cfg, state, &demos, &NoHooks).unwrap();
    assert_eq!(resumed.report.records, a.report.records[10..].to_vec());
    assert_eq!(resumed.state.model.params(), a.state.model.params());
    assert_eq!(resumed.state.constraint.params(), a.state.constraint.params());
}

#[test]
fn report_csv_has_fixed_header_and_round_trips() {
    let demos = cat_set(&[0, 1]);
    let out = train(&small_config(Selector::GanStyle), CategoricalModel::uniform(2).unwrap(), identity(0.2), &demos, &NoHooks).unwrap();
    let text = out.report.to_csv_string().unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
    assert_eq!(TrainReport::from_csv(&text).unwrap(), out.report);
    assert_eq!(TrainReport::default().to_csv_string().unwrap().trim(), REPORT_HEADER);
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        TrainConfig { alpha: 0.0, ..Default::default() },
        TrainConfig { lambda: -1.0, ..Default::default() },
        TrainConfig { theta_rate: 0.0, ..Default::default() },
        TrainConfig { n_samples: 99, ..Default::default() },
        TrainConfig { checkpoint_every: Some(3), ..Default::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"alpha": 1.0, "bogus": 2}"#).is_err());
    assert_eq!(Selector::parse("naive-eq5").unwrap(), Selector::NaiveEq5);
    assert!(Selector::parse("nope").is_err());
}

/// `L(θ) + λ (KL(q*‖p_θ) − α E_{q*}[f])` by enumeration.
fn exact_objective(p: &CategoricalModel, f: &Lin, alpha: f64, lambda: f64, demos: &[&CatDemo]) -> f64 {
    let (nll, _) = p.original_objective(demos, DistanceKind::Squared, 1, &StreamFamily::new(0, "o")).unwrap();
    let t = EnergyDistribution::new(p, &(), f, &(), alpha).unwrap().exact_q(100).unwrap();
    nll + lambda * t.pr_objective(&t.probs, alpha).unwrap()
}

#[test]
fn em_cycle_does_not_increase_objective() {
    let mut rng = stream(8, "em", 0);
    for _ in 0..20 {
        let k = rng.random_range(2..10);
        let p = CategoricalModel::from_logits((0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let f = Lin::new(FeatureMap::outcome_one_hot(k), (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let demos: Vec<CatDemo> = (0..12).map(|_| demo(rng.random_range(0..k))).collect();
        let refs: Vec<&CatDemo> = demos.iter().collect();
        let (alpha, lambda) = (1.0, 0.7);
        let before = exact_objective(&p, &f, alpha, lambda, &refs);
        let (_, g) = p.original_objective(&refs, DistanceKind::Squared, 1, &StreamFamily::new(0, "o")).unwrap();
        let dir = mstep_explicit(&p, &(), &f, &(), alpha, &exact(), &StreamFamily::new(0, "m")).unwrap();
        let descent: Vec<f64> = g.iter().zip(&dir).map(|(a, b)| a - lambda * b).collect();
        let moved = p.with_params(p.params().stepped(&descent, -1e-3).unwrap()).unwrap();
        let after = exact_objective(&moved, &f, alpha, lambda, &refs);
        assert!(after <= before + 1e-8, "{before} -> {after}");
    }
}

#[test]
fn explicit_models_refuse_nothing_and_implicit_refuse_exact() {
    let m = ImplicitPushforwardModel::affine_scalar(0.0, 1.0);
    let d = rig_demo(0.1);
    let err = m.q_expectation(&d.context, &Quadratic::new(1.0), &d.side, 1.0, 1, |_, _, _| Ok(()), &exact(), &StreamFamily::new(0, "x"));
    assert!(matches!(err, Err(Error::ImplicitDensity)));
    assert!(m.density(&d.context, &d.sample).is_none());
    let p = CategoricalModel::uniform(3).unwrap();
    assert!(p.density(&(), &1).is_some());
    assert!((p.log_prob(&(), &1).unwrap() + 3f64.ln()).abs() < 1e-15);
}

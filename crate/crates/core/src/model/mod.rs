//! Sample spaces and the desk-scale generative models that get regularized.
//!
//! Explicit models expose `log_prob` and its parameter gradient. The implicit
//! pushforward model only simulates: it implements [`ImplicitModel`] and never
//! [`ExplicitModel`], so density-based code cannot be instantiated with it.

mod categorical;
mod pushforward;
mod sequence;

pub use categorical::CategoricalModel;
pub use pushforward::{Activation, CellFeatures, ImplicitPushforwardModel};
pub use sequence::{AutoregressiveSequenceModel, History};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::SeededStream;

/// Default cap on the size of spaces that may be enumerated exactly.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SampleSpace {
    FiniteSet {
        outcomes: usize,
    },
    TokenSequence {
        vocab: usize,
        length: usize,
    },
    /// Values live in `[0, 1]`.
    RealGrid {
        height: usize,
        width: usize,
    },
}

impl SampleSpace {
    pub fn finite(outcomes: usize) -> Result<Self> {
        if outcomes < 2 {
            return Err(Error::InvalidSpace(format!("finite set needs K >= 2, got {outcomes}")));
        }
        Ok(Self::FiniteSet { outcomes })
    }

    pub fn sequence(vocab: usize, length: usize) -> Result<Self> {
        if vocab < 2 || length < 1 {
            return Err(Error::InvalidSpace(format!("token sequences need V >= 2 and L >= 1, got V={vocab}, L={length}")));
        }
        Ok(Self::TokenSequence { vocab, length })
    }

    pub fn grid(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSpace("grid dimensions must be positive".into()));
        }
        Ok(Self::RealGrid { height, width })
    }

    /// Number of elements, `None` for continuous spaces. Saturates at `u128::MAX`.
    pub fn cardinality(&self) -> Option<u128> {
        match *self {
            Self::FiniteSet { outcomes } => Some(outcomes as u128),
            Self::TokenSequence { vocab, length } => {
                let mut size: u128 = 1;
                for _ in 0..length {
                    size = size.saturating_mul(vocab as u128);
                }
                Some(size)
            }
            Self::RealGrid { .. } => None,
        }
    }

    pub fn is_enumerable(&self, cap: u64) -> bool {
        matches!(self.cardinality(), Some(n) if n <= cap as u128)
    }

    fn check_enumerable(&self, cap: u64) -> Result<usize> {
        match self.cardinality() {
            None => Err(Error::InvalidSpace("continuous grids cannot be enumerated".into())),
            Some(n) if n > cap as u128 => Err(Error::EnumerationCap { size: n, cap }),
            Some(n) => Ok(n as usize),
        }
    }

    /// Every element once, in lexicographic order.
    pub fn enumerate(&self, cap: u64) -> Result<Vec<Sample>> {
        match self {
            Self::FiniteSet { .. } => Ok(usize::enumerate_space(self, cap)?.into_iter().map(Sample::Outcome).collect()),
            Self::TokenSequence { .. } => Ok(Vec::<usize>::enumerate_space(self, cap)?.into_iter().map(Sample::Tokens).collect()),
            Self::RealGrid { .. } => Err(Error::InvalidSpace("continuous grids cannot be enumerated".into())),
        }
    }

    pub fn contains(&self, sample: &Sample) -> bool {
        match (self, sample) {
            (Self::FiniteSet { .. }, Sample::Outcome(k)) => k.in_space(self),
            (Self::TokenSequence { .. }, Sample::Tokens(t)) => t.in_space(self),
            (Self::RealGrid { .. }, Sample::Grid(g)) => g.in_space(self),
            _ => false,
        }
    }
}

/// Typed sample representation usable by enumeration-based code.
pub trait SpaceElement: Clone + Send + Sync + Sized {
    fn enumerate_space(space: &SampleSpace, cap: u64) -> Result<Vec<Self>>;
    fn in_space(&self, space: &SampleSpace) -> bool;
}

impl SpaceElement for usize {
    fn enumerate_space(space: &SampleSpace, cap: u64) -> Result<Vec<Self>> {
        match space {
            SampleSpace::FiniteSet { .. } => Ok((0..space.check_enumerable(cap)?).collect()),
            _ => Err(Error::InvalidSpace("outcome indices need a finite-set space".into())),
        }
    }

    fn in_space(&self, space: &SampleSpace) -> bool {
        matches!(space, SampleSpace::FiniteSet { outcomes } if self < outcomes)
    }
}

impl SpaceElement for Vec<usize> {
    fn enumerate_space(space: &SampleSpace, cap: u64) -> Result<Vec<Self>> {
        let SampleSpace::TokenSequence { vocab, length } = *space else {
            return Err(Error::InvalidSpace("token sequences need a token-sequence space".into()));
        };
        let size = space.check_enumerable(cap)?;
        let mut out = Vec::with_capacity(size);
        let mut cur = vec![0usize; length];
        for _ in 0..size {
            out.push(cur.clone());
            for pos in (0..length).rev() {
                cur[pos] += 1;
                if cur[pos] < vocab {
                    break;
                }
                cur[pos] = 0;
            }
        }
        Ok(out)
    }

    fn in_space(&self, space: &SampleSpace) -> bool {
        matches!(space, SampleSpace::TokenSequence { vocab, length }
            if self.len() == *length && self.iter().all(|t| t < vocab))
    }
}

impl SpaceElement for Grid {
    fn enumerate_space(_: &SampleSpace, _: u64) -> Result<Vec<Self>> {
        Err(Error::InvalidSpace("continuous grids cannot be enumerated".into()))
    }

    fn in_space(&self, space: &SampleSpace) -> bool {
        matches!(space, SampleSpace::RealGrid { height, width }
            if self.height == *height && self.width == *width
                && self.values.iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

/// A row-major real grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch { expected: height * width, got: values.len() });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }
}

/// Runtime-tagged sample, used where the model class is only known at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sample {
    Outcome(usize),
    Tokens(Vec<usize>),
    Grid(Grid),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Explicit,
    Implicit,
}

/// A parameterized distribution that can be simulated.
pub trait GenerativeModel: Send + Sync {
    type Sample: Clone + Send + Sync;
    /// Conditioning input (template, keypoints, ...); `()` when unconditional.
    type Context: Sync;

    fn kind(&self) -> ModelKind;
    fn space(&self) -> SampleSpace;
    fn params(&self) -> &ParamVector;
    /// The same architecture with new parameters.
    fn with_params(&self, params: ParamVector) -> Result<Self>
    where
        Self: Sized;

    fn sample_one(&self, ctx: &Self::Context, rng: &mut SeededStream) -> Self::Sample;

    /// `n` i.i.d. draws.
    fn sample(&self, ctx: &Self::Context, rng: &mut SeededStream, n: usize) -> Result<Vec<Self::Sample>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        Ok((0..n).map(|_| self.sample_one(ctx, rng)).collect())
    }
}

/// Models with an evaluable, differentiable density.
pub trait ExplicitModel: GenerativeModel {
    fn log_prob(&self, ctx: &Self::Context, x: &Self::Sample) -> Result<f64>;

    /// `∇_θ log p_θ(x)` laid out like [`GenerativeModel::params`].
    fn grad_log_prob(&self, ctx: &Self::Context, x: &Self::Sample) -> Result<ParamVector> {
        let mut acc = vec![0.0; self.params().len()];
        self.accumulate_grad_log_prob(ctx, x, 1.0, &mut acc)?;
        ParamVector::new(self.params().layout().clone(), acc)
    }

    /// `acc += scale · ∇_θ log p_θ(x)`; lets sparse gradients skip dense temporaries.
    fn accumulate_grad_log_prob(&self, ctx: &Self::Context, x: &Self::Sample, scale: f64, acc: &mut [f64]) -> Result<()>;
}

/// Models defined by a deterministic map of standard-normal noise.
pub trait ImplicitModel: GenerativeModel {
    fn noise_dim(&self) -> usize;

    fn draw_noise(&self, rng: &mut SeededStream) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..self.noise_dim()).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// `g_θ(z, ctx)`.
    fn push(&self, ctx: &Self::Context, z: &[f64]) -> Self::Sample;

    /// Vector-Jacobian product `(∂g_θ(z, ctx)/∂θ)ᵀ · upstream`, where
    /// `upstream` is a gradient with respect to the generated sample.
    fn pullback_params(&self, ctx: &Self::Context, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;
}

/// A model whose class is decided at run time (configs, checkpoints, the CLI).
#[derive(Clone, Debug)]
pub enum AnyModel {
    Categorical(CategoricalModel),
    Sequence(AutoregressiveSequenceModel),
    Pushforward(ImplicitPushforwardModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Categorical(m) => m.kind(),
            Self::Sequence(m) => m.kind(),
            Self::Pushforward(m) => m.kind(),
        }
    }

    pub fn space(&self) -> SampleSpace {
        match self {
            Self::Categorical(m) => m.space(),
            Self::Sequence(m) => m.space(),
            Self::Pushforward(m) => m.space(),
        }
    }

    /// Unconditional log density. Implicit models are refused.
    pub fn log_prob(&self, x: &Sample) -> Result<f64> {
        match (self, x) {
            (Self::Pushforward(_), _) => Err(Error::ImplicitDensity),
            (Self::Categorical(m), Sample::Outcome(k)) => m.log_prob(&(), k),
            (Self::Sequence(m), Sample::Tokens(t)) => m.log_prob(&Vec::new(), t),
            (_, other) => Err(Error::OutOfSpace(format!("{other:?} does not belong to {:?}", self.space()))),
        }
    }

    pub fn grad_log_prob(&self, x: &Sample) -> Result<ParamVector> {
        match (self, x) {
            (Self::Pushforward(_), _) => Err(Error::ImplicitDensity),
            (Self::Categorical(m), Sample::Outcome(k)) => m.grad_log_prob(&(), k),
            (Self::Sequence(m), Sample::Tokens(t)) => m.grad_log_prob(&Vec::new(), t),
            (_, other) => Err(Error::OutOfSpace(format!("{other:?} does not belong to {:?}", self.space()))),
        }
    }

    /// Unconditional draws; the pushforward model uses all-zero context features.
    pub fn sample(&self, rng: &mut SeededStream, n: usize) -> Result<Vec<Sample>> {
        Ok(match self {
            Self::Categorical(m) => m.sample(&(), rng, n)?.into_iter().map(Sample::Outcome).collect(),
            Self::Sequence(m) => m.sample(&Vec::new(), rng, n)?.into_iter().map(Sample::Tokens).collect(),
            Self::Pushforward(m) => {
                let ctx = CellFeatures::constant(m.height() * m.width(), m.feature_dim());
                m.sample(&ctx, rng, n)?.into_iter().map(Sample::Grid).collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerate_small_spaces() {
        let s = SampleSpace::finite(3).unwrap();
        assert_eq!(s.enumerate(DEFAULT_ENUMERATION_CAP).unwrap(), vec![Sample::Outcome(0), Sample::Outcome(1), Sample::Outcome(2)]);

        let s = SampleSpace::sequence(2, 2).unwrap();
        let all = Vec::<usize>::enumerate_space(&s, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let s = SampleSpace::sequence(10, 7).unwrap();
        assert!(!s.is_enumerable(DEFAULT_ENUMERATION_CAP));
        match s.enumerate(DEFAULT_ENUMERATION_CAP) {
            Err(Error::EnumerationCap { size, cap }) => {
                assert_eq!(size, 10_000_000);
                assert_eq!(cap, 1_048_576);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn grids_are_not_enumerable() {
        let s = SampleSpace::grid(2, 2).unwrap();
        assert!(!s.is_enumerable(u64::MAX));
        assert!(s.enumerate(u64::MAX).is_err());
    }

    #[test]
    fn invalid_spaces_rejected() {
        assert!(SampleSpace::finite(1).is_err());
        assert!(SampleSpace::sequence(1, 3).is_err());
        assert!(SampleSpace::sequence(2, 0).is_err());
    }

    #[test]
    fn implicit_model_density_is_refused() {
        let m = AnyModel::Pushforward(ImplicitPushforwardModel::affine_scalar(0.0, 1.0));
        let mut rng = crate::rng::stream(1, "t", 0);
        let x = m.sample(&mut rng, 1).unwrap().pop().unwrap();
        assert!(matches!(m.log_prob(&x), Err(Error::ImplicitDensity)));
        assert!(matches!(m.grad_log_prob(&x), Err(Error::ImplicitDensity)));
    }

    #[test]
    fn out_of_space_samples_rejected() {
        let m = AnyModel::Categorical(CategoricalModel::uniform(4).unwrap());
        assert!(matches!(m.log_prob(&Sample::Outcome(4)), Err(Error::OutOfSpace(_))));
        assert!(matches!(m.log_prob(&Sample::Tokens(vec![0])), Err(Error::OutOfSpace(_))));
    }
}

//! Learnable constraint functions `f_φ(x, s)` scoring a sample `x` against its
//! instance side information `s`. Higher means better.

mod linear;
mod matching;
mod parts;

pub use linear::{FeatureMap, LinearFeatureConstraint};
pub use matching::{InfillSide, MatchingConstraint, Span};
pub use parts::{GridSide, PartClassifier, PartConsistencyConstraint};

use crate::error::{Error, Result};
use crate::params::{Block, Layout, ParamVector};

pub trait ConstraintModel: Send + Sync {
    type Sample;
    type Side: Sync;

    fn params(&self) -> &ParamVector;

    fn with_params(&self, params: ParamVector) -> Result<Self>
    where
        Self: Sized;

    fn evaluate(&self, x: &Self::Sample, s: &Self::Side) -> Result<f64>;

    /// `acc += scale · ∇_φ f_φ(x, s)`.
    fn accumulate_grad_params(&self, x: &Self::Sample, s: &Self::Side, scale: f64, acc: &mut [f64]) -> Result<()>;

    /// `∇_φ f_φ(x, s)` laid out like [`ConstraintModel::params`].
    fn grad_params(&self, x: &Self::Sample, s: &Self::Side) -> Result<ParamVector> {
        let mut acc = vec![0.0; self.params().len()];
        self.accumulate_grad_params(x, s, 1.0, &mut acc)?;
        ParamVector::new(self.params().layout().clone(), acc)
    }

    /// `∇_x f_φ(x, s)` for constraints that are differentiable in the sample.
    fn grad_sample(&self, _x: &Self::Sample, _s: &Self::Side) -> Result<Vec<f64>> {
        Err(Error::NotSampleDifferentiable)
    }
}

/// Zeroes the gradient entries that belong to `frozen` blocks.
pub fn mask_frozen(grad: &mut [f64], layout: &Layout, frozen: &[String]) {
    for block in layout.blocks().iter().filter(|b| frozen.contains(&b.name)) {
        grad[block.range()].iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `f(x, s) = Σ_i w_i f_i(x, s)`: several constraints of one class, each with
/// its own weight (so the effective strength of member `i` is `α·w_i`).
#[derive(Clone, Debug)]
pub struct WeightedSum<C> {
    members: Vec<(f64, C)>,
    params: ParamVector,
}

impl<C: ConstraintModel> WeightedSum<C> {
    pub fn new(members: Vec<(f64, C)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("weighted sum needs at least one member".into()));
        }
        let params = Self::concat(&members)?;
        Ok(Self { members, params })
    }

    fn concat(members: &[(f64, C)]) -> Result<ParamVector> {
        let mut blocks = Vec::new();
        let mut values = Vec::new();
        for (i, (_, c)) in members.iter().enumerate() {
            for b in c.params().layout().blocks() {
                blocks.push((format!("m{i}.{}", b.name), b.len));
                values.extend_from_slice(&c.params().values()[b.range()]);
            }
        }
        ParamVector::new(Layout::contiguous(blocks), values)
    }

    pub fn members(&self) -> &[(f64, C)] {
        &self.members
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.members
            .iter()
            .map(|(_, c)| {
                let o = acc;
                acc += c.params().len();
                o
            })
            .collect()
    }
}

impl<C: ConstraintModel> ConstraintModel for WeightedSum<C> {
    type Sample = C::Sample;
    type Side = C::Side;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        let offsets = self.offsets();
        let members = self
            .members
            .iter()
            .zip(offsets)
            .map(|((w, c), off)| {
                let n = c.params().len();
                let p = ParamVector::new(c.params().layout().clone(), params.values()[off..off + n].to_vec())?;
                Ok((*w, c.with_params(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members, params })
    }

    fn evaluate(&self, x: &Self::Sample, s: &Self::Side) -> Result<f64> {
        self.members.iter().map(|(w, c)| Ok(w * c.evaluate(x, s)?)).sum()
    }

    fn accumulate_grad_params(&self, x: &Self::Sample, s: &Self::Side, scale: f64, acc: &mut [f64]) -> Result<()> {
        for ((w, c), off) in self.members.iter().zip(self.offsets()) {
            let n = c.params().len();
            c.accumulate_grad_params(x, s, scale * w, &mut acc[off..off + n])?;
        }
        Ok(())
    }

    fn grad_sample(&self, x: &Self::Sample, s: &Self::Side) -> Result<Vec<f64>> {
        let mut total: Option<Vec<f64>> = None;
        for (w, c) in &self.members {
            let g = c.grad_sample(x, s)?;
            match total.as_mut() {
                None => total = Some(g.iter().map(|v| w * v).collect()),
                Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b),
            }
        }
        total.ok_or(Error::NotSampleDifferentiable)
    }
}

/// Block lookup that reports a useful error.
pub(crate) fn block<'a>(layout: &'a Layout, name: &str) -> Result<&'a Block> {
    layout.get(name).ok_or_else(|| Error::InvalidParams(format!("missing parameter block {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_combines_members() {
        let a = LinearFeatureConstraint::new(FeatureMap::outcome_identity(), vec![2.0]).unwrap();
        let b = LinearFeatureConstraint::new(FeatureMap::outcome_one_hot(3), vec![1.0, -1.0, 0.5]).unwrap();
        let sum = WeightedSum::new(vec![(1.0, a.clone()), (0.5, a)]).unwrap();
        assert!((sum.evaluate(&2, &()).unwrap() - 6.0).abs() < 1e-15);
        let g = sum.grad_params(&2, &()).unwrap();
        assert_eq!(g.values(), &[2.0, 1.0]);

        let moved = sum.with_params(ParamVector::new(sum.params().layout().clone(), vec![1.0, 1.0]).unwrap()).unwrap();
        assert!((moved.evaluate(&1, &()).unwrap() - 1.5).abs() < 1e-15);

        let single = WeightedSum::new(vec![(2.0, b)]).unwrap();
        assert!((single.evaluate(&1, &()).unwrap() + 2.0).abs() < 1e-15);
        assert!(matches!(single.grad_sample(&1, &()), Err(Error::NotSampleDifferentiable)));
    }

    #[test]
    fn frozen_blocks_are_zeroed() {
        let layout = Layout::contiguous([("a", 2), ("b", 1)]);
        let mut g = vec![1.0, 2.0, 3.0];
        mask_frozen(&mut g, &layout, &["a".to_string()]);
        assert_eq!(g, vec![0.0, 0.0, 3.0]);
    }
}

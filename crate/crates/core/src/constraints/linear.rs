use std::fmt;
use std::sync::Arc;

use super::ConstraintModel;
use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector};

type FeatureFn<X, S> = dyn Fn(&X, &S) -> Vec<f64> + Send + Sync;

/// A named feature map `ψ(x, s) ∈ R^M`.
pub struct FeatureMap<X, S> {
    name: String,
    dim: usize,
    map: Arc<FeatureFn<X, S>>,
}

impl<X, S> Clone for FeatureMap<X, S> {
    fn clone(&self) -> Self {
        Self { name: self.name.clone(), dim: self.dim, map: Arc::clone(&self.map) }
    }
}

impl<X, S> fmt::Debug for FeatureMap<X, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

impl<X, S> FeatureMap<X, S> {
    pub fn new(name: impl Into<String>, dim: usize, map: impl Fn(&X, &S) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { name: name.into(), dim, map: Arc::new(map) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, x: &X, s: &S) -> Result<Vec<f64>> {
        let psi = (self.map)(x, s);
        if psi.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: psi.len() });
        }
        Ok(psi)
    }
}

impl<S> FeatureMap<usize, S> {
    /// `ψ(x) = (x)`.
    pub fn outcome_identity() -> Self {
        Self::new("identity", 1, |x: &usize, _: &S| vec![*x as f64])
    }

    /// `ψ(x) = e_x ∈ R^K`.
    pub fn outcome_one_hot(outcomes: usize) -> Self {
        Self::new("one-hot", outcomes, move |x: &usize, _: &S| {
            let mut v = vec![0.0; outcomes];
            if *x < outcomes {
                v[*x] = 1.0;
            }
            v
        })
    }

    /// `ψ(x) = table[x]`.
    pub fn outcome_table(name: impl Into<String>, table: Vec<Vec<f64>>) -> Result<Self> {
        let dim = table.first().map_or(0, Vec::len);
        if table.iter().any(|row| row.len() != dim) {
            return Err(Error::InvalidArgument("feature table rows differ in length".into()));
        }
        Ok(Self::new(name, dim, move |x: &usize, _: &S| table.get(*x).cloned().unwrap_or_default()))
    }

    /// Built-in outcome features by name: `identity` or `one-hot`.
    pub fn by_name(name: &str, outcomes: usize) -> Result<Self> {
        match name {
            "identity" => Ok(Self::outcome_identity()),
            "one-hot" => Ok(Self::outcome_one_hot(outcomes)),
            other => Err(Error::InvalidConfig(format!("unknown feature map {other}"))),
        }
    }
}

impl<S> FeatureMap<Vec<usize>, S> {
    /// Number of occurrences of `token` in the sequence.
    pub fn token_count(token: usize) -> Self {
        Self::new(format!("count-{token}"), 1, move |x: &Vec<usize>, _: &S| vec![x.iter().filter(|t| **t == token).count() as f64])
    }
}

/// `f_φ(x, s) = φ · ψ(x, s)`.
#[derive(Clone, Debug)]
pub struct LinearFeatureConstraint<X, S> {
    features: FeatureMap<X, S>,
    params: ParamVector,
}

impl<X, S> LinearFeatureConstraint<X, S> {
    pub fn new(features: FeatureMap<X, S>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != features.dim() {
            return Err(Error::DimensionMismatch { expected: features.dim(), got: weights.len() });
        }
        let params = ParamVector::new(Layout::contiguous([("weights", weights.len())]), weights)?;
        Ok(Self { features, params })
    }

    pub fn zeros(features: FeatureMap<X, S>) -> Self {
        let n = features.dim();
        Self::new(features, vec![0.0; n]).expect("matching length")
    }

    pub fn feature_map(&self) -> &FeatureMap<X, S> {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        self.params.values()
    }
}

impl<X: Send + Sync, S: Send + Sync> ConstraintModel for LinearFeatureConstraint<X, S> {
    type Sample = X;
    type Side = S;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.features.clone(), params.values().to_vec())
    }

    fn evaluate(&self, x: &X, s: &S) -> Result<f64> {
        let psi = self.features.features(x, s)?;
        Ok(psi.iter().zip(self.params.values()).map(|(a, b)| a * b).sum())
    }

    fn accumulate_grad_params(&self, x: &X, s: &S, scale: f64, acc: &mut [f64]) -> Result<()> {
        let psi = self.features.features(x, s)?;
        if acc.len() != psi.len() {
            return Err(Error::DimensionMismatch { expected: psi.len(), got: acc.len() });
        }
        for (a, p) in acc.iter_mut().zip(&psi) {
            *a += scale * p;
        }
        Ok(())
    }
}

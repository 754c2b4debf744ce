use rand::Rng;

use super::{ExplicitModel, GenerativeModel, ModelKind, SampleSpace};
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, softmax};
use crate::params::{Layout, ParamVector};
use crate::rng::SeededStream;

/// Softmax distribution over `K` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalModel {
    params: ParamVector,
    /// Opaque conditioning label carried for bookkeeping.
    pub context: Option<u32>,
    log_probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl CategoricalModel {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        SampleSpace::finite(logits.len())?;
        let params = ParamVector::new(Layout::contiguous([("logits", logits.len())]), logits)?;
        Ok(Self::from_params_unchecked(params))
    }

    pub fn uniform(outcomes: usize) -> Result<Self> {
        Self::from_logits(vec![0.0; outcomes])
    }

    /// Logits `log p` for a given probability vector (zeros become very negative).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::from_logits(probs.iter().map(|p| if *p > 0.0 { p.ln() } else { -745.0 }).collect())
    }

    fn from_params_unchecked(params: ParamVector) -> Self {
        let log_probs = log_softmax(params.values());
        let mut acc = 0.0;
        let cdf = log_probs
            .iter()
            .map(|l| {
                acc += l.exp();
                acc
            })
            .collect();
        Self { params, context: None, log_probs, cdf }
    }

    pub fn outcomes(&self) -> usize {
        self.log_probs.len()
    }

    pub fn logits(&self) -> &[f64] {
        self.params.values()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(self.params.values())
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

impl GenerativeModel for CategoricalModel {
    type Sample = usize;
    type Context = ();

    fn kind(&self) -> ModelKind {
        ModelKind::Explicit
    }

    fn space(&self) -> SampleSpace {
        SampleSpace::FiniteSet { outcomes: self.outcomes() }
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.len() != self.outcomes() {
            return Err(Error::DimensionMismatch { expected: self.outcomes(), got: params.len() });
        }
        let mut out = Self::from_params_unchecked(params);
        out.context = self.context;
        Ok(out)
    }

    fn sample_one(&self, _: &(), rng: &mut SeededStream) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|c| *c <= u).min(self.outcomes() - 1)
    }
}

impl ExplicitModel for CategoricalModel {
    fn log_prob(&self, _: &(), x: &usize) -> Result<f64> {
        self.log_probs.get(*x).copied().ok_or_else(|| Error::OutOfSpace(format!("outcome {x} not in 0..{}", self.outcomes())))
    }

    fn accumulate_grad_log_prob(&self, _: &(), x: &usize, scale: f64, acc: &mut [f64]) -> Result<()> {
        if *x >= self.outcomes() {
            return Err(Error::OutOfSpace(format!("outcome {x} not in 0..{}", self.outcomes())));
        }
        if acc.len() != self.outcomes() {
            return Err(Error::DimensionMismatch { expected: self.outcomes(), got: acc.len() });
        }
        for (k, (a, l)) in acc.iter_mut().zip(&self.log_probs).enumerate() {
            let indicator = if k == *x { 1.0 } else { 0.0 };
            *a += scale * (indicator - l.exp());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn uniform_log_prob() {
        let m = CategoricalModel::uniform(4).unwrap();
        for x in 0..4 {
            assert!((m.log_prob(&(), &x).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_by_hand() {
        let m = CategoricalModel::from_logits(vec![0.0, 3f64.ln()]).unwrap();
        assert!((m.log_prob(&(), &1).unwrap() - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn grad_is_indicator_minus_softmax() {
        let m = CategoricalModel::from_logits(vec![0.3, -1.2, 0.8]).unwrap();
        let p = m.probs();
        let g = m.grad_log_prob(&(), &2).unwrap();
        for k in 0..3 {
            let expected = if k == 2 { 1.0 } else { 0.0 } - p[k];
            assert!((g.values()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_grad_averages_to_zero() {
        let m = CategoricalModel::uniform(5).unwrap();
        let mut acc = vec![0.0; 5];
        for x in 0..5 {
            m.accumulate_grad_log_prob(&(), &x, 0.2, &mut acc).unwrap();
        }
        assert!(acc.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn balanced_sampling_frequencies() {
        let m = CategoricalModel::uniform(2).unwrap();
        let xs = m.sample(&(), &mut stream(11, "categorical", 0), 100_000).unwrap();
        let ones = xs.iter().filter(|x| **x == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() < 0.01, "{ones}");
    }

    #[test]
    fn degenerate_logit_dominates() {
        let m = CategoricalModel::from_logits(vec![0.0, 30.0, 0.0, 0.0]).unwrap();
        let xs = m.sample(&(), &mut stream(3, "categorical", 0), 100_000).unwrap();
        let hit = xs.iter().filter(|x| **x == 1).count() as f64 / 1e5;
        assert!(hit >= 0.9999);
    }

    #[test]
    fn zero_samples_rejected() {
        let m = CategoricalModel::uniform(2).unwrap();
        assert!(m.sample(&(), &mut stream(0, "x", 0), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn grad_matches_finite_differences(logits in prop::collection::vec(-3.0f64..3.0, 8), x in 0usize..8) {
            let m = CategoricalModel::from_logits(logits.clone()).unwrap();
            let analytic = m.grad_log_prob(&(), &x).unwrap();
            let numeric = finite_diff_grad(
                |th: &[f64]| CategoricalModel::from_logits(th.to_vec()).unwrap().log_prob(&(), &x).unwrap(),
                &logits,
                1e-5,
            ).unwrap();
            for (a, n) in analytic.values().iter().zip(&numeric) {
                prop_assert!((a - n).abs() <= 1e-6);
            }
        }

        #[test]
        fn probabilities_sum_to_one(logits in prop::collection::vec(-20.0f64..20.0, 2..64)) {
            let m = CategoricalModel::from_logits(logits).unwrap();
            let total: f64 = (0..m.outcomes()).map(|x| m.log_prob(&(), &x).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

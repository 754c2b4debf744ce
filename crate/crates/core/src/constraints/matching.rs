use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{block, ConstraintModel};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::params::{Layout, ParamVector};
use crate::rng::SeededStream;

/// A contiguous masked region `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Side information of one infill instance: the template (with `None` at
/// masked positions), the masked spans and the held-out tokens, concatenated
/// span by span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillSide {
    pub template: Vec<Option<usize>>,
    pub spans: Vec<Span>,
    pub infill: Vec<usize>,
}

impl InfillSide {
    /// Plugs the held-out tokens back into the template.
    pub fn fill(&self) -> Result<Vec<usize>> {
        let mut out = self.template.clone();
        let mut k = 0;
        for span in &self.spans {
            for pos in span.start..span.start + span.len {
                let slot = out.get_mut(pos).ok_or_else(|| Error::OutOfSpace(format!("span position {pos}")))?;
                *slot = Some(*self.infill.get(k).ok_or_else(|| Error::InvalidArgument("infill shorter than spans".into()))?);
                k += 1;
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::InvalidArgument(format!("position {i} masked but not covered by a span"))))
            .collect()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().flat_map(|s| s.start..s.start + s.len)
    }
}

/// One-hidden-layer scorer of how well the generated tokens in each masked
/// span match the held-out tokens.
///
/// For every span, `e_x` and `e_t` are the averages of learned token
/// embeddings over the generated and held-out tokens. The span score is the
/// log-sigmoid of `w2 · tanh(W1 [e_x; e_t; e_x ⊙ e_t] + b1) + b2`, read as the
/// log-probability that the span matches, and `f` is the mean span score (so
/// `f ≤ 0`). With no masked span the embeddings are zero vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingConstraint {
    vocab: usize,
    embed_dim: usize,
    hidden: usize,
    params: ParamVector,
}

struct SpanForward {
    ex: Vec<f64>,
    et: Vec<f64>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    score: f64,
    /// `d score / d logit`.
    slope: f64,
}

impl MatchingConstraint {
    pub fn new(vocab: usize, embed_dim: usize, hidden: usize) -> Result<Self> {
        if vocab == 0 || embed_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("matching constraint dimensions must be positive".into()));
        }
        let layout =
            Layout::contiguous([("embeddings", vocab * embed_dim), ("w1", hidden * 3 * embed_dim), ("b1", hidden), ("w2", hidden), ("b2", 1)]);
        Ok(Self { vocab, embed_dim, hidden, params: ParamVector::zeros(layout) })
    }

    /// Gaussian initialization with standard deviation `scale` (`b2` starts at 0).
    pub fn randomized(vocab: usize, embed_dim: usize, hidden: usize, scale: f64, rng: &mut SeededStream) -> Result<Self> {
        let c = Self::new(vocab, embed_dim, hidden)?;
        let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let b2 = block(c.params.layout(), "b2")?.start;
        let values = (0..c.params.len()).map(|i| if i == b2 { 0.0 } else { normal.sample(rng) }).collect();
        c.with_params(ParamVector::new(c.params.layout().clone(), values)?)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn embedding(&self, token: usize) -> &[f64] {
        let d = self.embed_dim;
        &self.params.values()[token * d..(token + 1) * d]
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let w1 = self.vocab * self.embed_dim;
        let b1 = w1 + self.hidden * 3 * self.embed_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden;
        (w1, b1, w2, b2)
    }

    fn mean_embedding(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut e = vec![0.0; self.embed_dim];
        if tokens.is_empty() {
            return Ok(e);
        }
        for t in tokens {
            if *t >= self.vocab {
                return Err(Error::OutOfSpace(format!("token {t} >= vocabulary {}", self.vocab)));
            }
            for (a, v) in e.iter_mut().zip(self.embedding(*t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        e.iter_mut().for_each(|v| *v /= n);
        Ok(e)
    }

    fn span_tokens<'a>(&self, x: &'a [usize], s: &'a InfillSide) -> Result<Vec<(Vec<usize>, &'a [usize])>> {
        let total: usize = s.spans.iter().map(|sp| sp.len).sum();
        if total != s.infill.len() {
            return Err(Error::DimensionMismatch { expected: total, got: s.infill.len() });
        }
        let mut k = 0;
        s.spans
            .iter()
            .map(|sp| {
                if sp.start + sp.len > x.len() {
                    return Err(Error::DimensionMismatch { expected: sp.start + sp.len, got: x.len() });
                }
                let gen = x[sp.start..sp.start + sp.len].to_vec();
                let truth = &s.infill[k..k + sp.len];
                k += sp.len;
                Ok((gen, truth))
            })
            .collect()
    }

    fn forward_span(&self, gen: &[usize], truth: &[usize]) -> Result<SpanForward> {
        let d = self.embed_dim;
        let ex = self.mean_embedding(gen)?;
        let et = self.mean_embedding(truth)?;
        let mut input = Vec::with_capacity(3 * d);
        input.extend_from_slice(&ex);
        input.extend_from_slice(&et);
        input.extend(ex.iter().zip(&et).map(|(a, b)| a * b));
        let (w1, b1, w2, b2) = self.offsets();
        let v = self.params.values();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &v[w1 + h * 3 * d..w1 + (h + 1) * 3 * d];
                (row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>() + v[b1 + h]).tanh()
            })
            .collect();
        let logit = hidden.iter().zip(&v[w2..w2 + self.hidden]).map(|(a, b)| a * b).sum::<f64>() + v[b2];
        // log σ(s) = −log(1 + e^{−s}), evaluated without overflow
        let score = -(-logit).max(0.0) - (-logit.abs()).exp().ln_1p();
        Ok(SpanForward { ex, et, input, hidden, score, slope: sigmoid(-logit) })
    }
}

impl ConstraintModel for MatchingConstraint {
    type Sample = Vec<usize>;
    type Side = InfillSide;

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        Ok(Self { params, ..self.clone() })
    }

    fn evaluate(&self, x: &Vec<usize>, s: &InfillSide) -> Result<f64> {
        let spans = self.span_tokens(x, s)?;
        if spans.is_empty() {
            return Ok(self.forward_span(&[], &[])?.score);
        }
        let mut total = 0.0;
        for (gen, truth) in &spans {
            total += self.forward_span(gen, truth)?.score;
        }
        Ok(total / spans.len() as f64)
    }

    fn accumulate_grad_params(&self, x: &Vec<usize>, s: &InfillSide, scale: f64, acc: &mut [f64]) -> Result<()> {
        if acc.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: acc.len() });
        }
        let mut spans = self.span_tokens(x, s)?;
        if spans.is_empty() {
            spans.push((Vec::new(), &[]));
        }
        let d = self.embed_dim;
        let (w1, b1, w2, b2) = self.offsets();
        let v = self.params.values();
        let ds = scale / spans.len() as f64;
        for (gen, truth) in &spans {
            let fw = self.forward_span(gen, truth)?;
            let ds = ds * fw.slope;
            acc[b2] += ds;
            let mut du = vec![0.0; 3 * d];
            for h in 0..self.hidden {
                acc[w2 + h] += ds * fw.hidden[h];
                let da = ds * v[w2 + h] * (1.0 - fw.hidden[h] * fw.hidden[h]);
                acc[b1 + h] += da;
                let row = w1 + h * 3 * d;
                for j in 0..3 * d {
                    acc[row + j] += da * fw.input[j];
                    du[j] += da * v[row + j];
                }
            }
            if !gen.is_empty() {
                let n = gen.len() as f64;
                for t in gen {
                    for j in 0..d {
                        acc[t * d + j] += (du[j] + du[2 * d + j] * fw.et[j]) / n;
                    }
                }
            }
            if !truth.is_empty() {
                let n = truth.len() as f64;
                for t in *truth {
                    for j in 0..d {
                        acc[t * d + j] += (du[d + j] + du[2 * d + j] * fw.ex[j]) / n;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;
    use crate::rng::stream;

    fn side() -> InfillSide {
        InfillSide {
            template: vec![Some(1), None, None, Some(4), None, Some(0)],
            spans: vec![Span { start: 1, len: 2 }, Span { start: 4, len: 1 }],
            infill: vec![2, 5, 3],
        }
    }

    #[test]
    fn fill_reconstructs_sequence() {
        assert_eq!(side().fill().unwrap(), vec![1, 2, 5, 4, 3, 0]);
    }

    #[test]
    fn grad_matches_finite_differences() {
        for seed in 0..100 {
            let c = MatchingConstraint::randomized(6, 3, 4, 0.8, &mut stream(seed, "match", 0)).unwrap();
            let x = vec![1, (seed % 6) as usize, 5, 4, 2, 0];
            let s = side();
            let g = c.grad_params(&x, &s).unwrap();
            let fd = finite_diff_grad(
                |th: &[f64]| {
                    let p = ParamVector::new(c.params().layout().clone(), th.to_vec()).unwrap();
                    c.with_params(p).unwrap().evaluate(&x, &s).unwrap()
                },
                c.params().values(),
                1e-5,
            )
            .unwrap();
            let err = g.values().iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn unused_token_embeddings_get_no_gradient() {
        let c = MatchingConstraint::randomized(6, 3, 4, 0.8, &mut stream(2, "match", 0)).unwrap();
        let x = vec![1, 2, 2, 4, 3, 0];
        let g = c.grad_params(&x, &side()).unwrap();
        // token 0, 1 and 4 appear only outside the masked spans
        for t in [0usize, 1, 4] {
            assert!(g.values()[t * 3..t * 3 + 3].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn no_mask_gives_constant_score() {
        let c = MatchingConstraint::randomized(4, 2, 3, 1.0, &mut stream(5, "match", 0)).unwrap();
        let s = InfillSide { template: vec![Some(0), Some(1)], spans: vec![], infill: vec![] };
        let a = c.evaluate(&vec![0, 1], &s).unwrap();
        let b = c.evaluate(&vec![3, 3], &s).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite() && a <= 0.0);
    }

    #[test]
    fn rejects_inconsistent_side() {
        let c = MatchingConstraint::new(6, 2, 2).unwrap();
        let mut s = side();
        s.infill.pop();
        assert!(c.evaluate(&vec![0; 6], &s).is_err());
        assert!(c.evaluate(&vec![0; 3], &side()).is_err());
        assert!(c.evaluate(&vec![9; 6], &side()).is_err());
    }
}

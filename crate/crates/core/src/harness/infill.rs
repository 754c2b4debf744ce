//! Template infilling on short token sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintModel, InfillSide, MatchingConstraint, Span};
use crate::error::{Error, Result};
use crate::model::{AutoregressiveSequenceModel, ExplicitModel, History};
use crate::numeric::log_sum_exp;
use crate::rng::{SeededStream, StreamFamily};
use crate::trainer::{Demo, DemonstrationSet, PrDiagnostics, Split, TrainHooks};

pub const MAX_VOCAB: usize = 12;
pub const MAX_LENGTH: usize = 7;

pub type InfillDemo = Demo<Vec<usize>, InfillSide, Vec<usize>>;
pub type InfillSet = DemonstrationSet<Vec<usize>, InfillSide, Vec<usize>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskPolicy {
    /// Nothing masked; the template is the sequence.
    None,
    /// `count` non-overlapping spans with lengths drawn uniformly from
    /// `min_len..=max_len`.
    Spans { count: usize, min_len: usize, max_len: usize },
}

impl MaskPolicy {
    fn draw(&self, length: usize, rng: &mut SeededStream) -> Result<Vec<Span>> {
        let (count, lo, hi) = match *self {
            Self::None => return Ok(Vec::new()),
            Self::Spans { count, min_len, max_len } => (count, min_len, max_len),
        };
        if lo == 0 || lo > hi || count * hi + count.saturating_sub(1) > length {
            return Err(Error::InvalidConfig(format!("{count} spans of length {lo}..={hi} do not fit in {length} tokens")));
        }
        // lay spans out left to right with random gaps
        let lens: Vec<usize> = (0..count).map(|_| rng.random_range(lo..=hi)).collect();
        let min_total = lens.iter().sum::<usize>() + count.saturating_sub(1);
        let mut slack = length - min_total;
        let mut pos = 0;
        let mut spans = Vec::with_capacity(count);
        for len in lens {
            let gap = rng.random_range(0..=slack);
            slack -= gap;
            pos += gap;
            spans.push(Span { start: pos, len });
            pos += len + 1;
        }
        Ok(spans)
    }
}

/// First-order Markov source with a few preferred successors per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovSource {
    /// Each row puts 0.6 and 0.3 on two random successors and spreads the
    /// rest evenly.
    pub fn random(vocab: usize, rng: &mut SeededStream) -> Self {
        let spread = |rng: &mut SeededStream| {
            let mut row = vec![0.1 / vocab as f64; vocab];
            let a = rng.random_range(0..vocab);
            let b = (a + rng.random_range(1..vocab)) % vocab;
            row[a] += 0.6;
            row[b] += 0.3;
            row
        };
        let initial = spread(rng);
        let transitions = (0..vocab).map(|_| spread(rng)).collect();
        Self { initial, transitions }
    }

    fn draw(row: &[f64], rng: &mut SeededStream) -> usize {
        let mut u: f64 = rng.random();
        for (i, p) in row.iter().enumerate() {
            u -= p;
            if u < 0.0 {
                return i;
            }
        }
        row.len() - 1
    }

    pub fn sample(&self, length: usize, rng: &mut SeededStream) -> Vec<usize> {
        let mut x = Vec::with_capacity(length);
        for i in 0..length {
            let row = if i == 0 { &self.initial } else { &self.transitions[x[i - 1]] };
            x.push(Self::draw(row, rng));
        }
        x
    }
}

/// Per-position context symbols: the template token, or `vocab` when masked.
pub fn context_symbols(side: &InfillSide, vocab: usize) -> Vec<usize> {
    side.template.iter().map(|t| t.unwrap_or(vocab)).collect()
}

fn make_demo(x: Vec<usize>, spans: Vec<Span>, vocab: usize, split: Split) -> InfillDemo {
    let mut template: Vec<Option<usize>> = x.iter().copied().map(Some).collect();
    let mut infill = Vec::new();
    for s in &spans {
        for slot in &mut template[s.start..s.start + s.len] {
            infill.push(slot.take().expect("spans do not overlap"));
        }
    }
    let side = InfillSide { template, spans, infill };
    let context = context_symbols(&side, vocab);
    Demo { sample: x, side, context, split }
}

/// `n_train` then `n_test` instances from a source drawn under the same seed.
pub fn generate_infill_dataset(vocab: usize, length: usize, mask: MaskPolicy, n_train: usize, n_test: usize, seed: u64) -> Result<InfillSet> {
    if !(2..=MAX_VOCAB).contains(&vocab) || !(1..=MAX_LENGTH).contains(&length) {
        return Err(Error::InvalidConfig(format!("infill needs 2 <= V <= {MAX_VOCAB} and 1 <= L <= {MAX_LENGTH}, got V={vocab}, L={length}")));
    }
    let family = StreamFamily::new(seed, "infill-data");
    let source = MarkovSource::random(vocab, &mut family.substream(0));
    let mut rng = family.substream(1);
    let mut records = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let x = source.sample(length, &mut rng);
        let spans = mask.draw(length, &mut rng)?;
        records.push(make_demo(x, spans, vocab, if i < n_train { Split::Train } else { Split::Test }));
    }
    DemonstrationSet::new(records)
}

/// Base model for the task: one logit row per (position, previous token,
/// context symbol).
pub fn infill_model(vocab: usize, length: usize) -> Result<AutoregressiveSequenceModel> {
    AutoregressiveSequenceModel::new(vocab, length, History::Markov(1), vocab + 1)
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity(model: &AutoregressiveSequenceModel, demos: &[&InfillDemo]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("perplexity needs a nonempty test split".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for d in demos {
        nll -= model.log_prob(&d.context, &d.sample)?;
        tokens += d.sample.len();
    }
    Ok((nll / tokens as f64).exp())
}

/// Fraction of masked spans whose greedy completion equals the held-out tokens.
pub fn infill_exact_match(model: &AutoregressiveSequenceModel, demos: &[&InfillDemo]) -> Result<f64> {
    let mut spans = 0usize;
    let mut hits = 0usize;
    for d in demos {
        let guess = model.greedy_decode(&d.context)?;
        let mut k = 0;
        for s in &d.side.spans {
            spans += 1;
            if guess[s.start..s.start + s.len] == d.side.infill[k..k + s.len] {
                hits += 1;
            }
            k += s.len;
        }
    }
    if spans == 0 {
        return Err(Error::InvalidArgument("no masked spans to score".into()));
    }
    Ok(hits as f64 / spans as f64)
}

/// Exact `q` quantities for one instance.
///
/// The constraint only reads the masked tokens, and the suffix after the
/// last span sums out of an autoregressive model, so `Z` needs only the
/// distribution of the token before each span and an enumeration of the
/// span contents. Requires a single span and a Markov(1) model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanMarginal {
    pub log_z: f64,
    pub expected_f: f64,
    /// `log E_p[w²]` with `w = exp(α f)`.
    pub log_second_moment: f64,
}

pub fn span_marginal(model: &AutoregressiveSequenceModel, constraint: &MatchingConstraint, demo: &InfillDemo, alpha: f64) -> Result<SpanMarginal> {
    if model.history() != History::Markov(1) {
        return Err(Error::InvalidArgument("span marginal needs a Markov(1) model".into()));
    }
    let spans = &demo.side.spans;
    let v = model.vocab();
    let ctx = &demo.context;
    let mut x = demo.sample.clone();
    if spans.is_empty() {
        let f = constraint.evaluate(&x, &demo.side)?;
        return Ok(SpanMarginal { log_z: alpha * f, expected_f: f, log_second_moment: 2.0 * alpha * f });
    }
    if spans.len() != 1 {
        return Err(Error::InvalidArgument("span marginal handles one span".into()));
    }
    let Span { start, len } = spans[0];
    // distribution of the token just before the span
    let mut prev: Vec<(Option<usize>, f64)> = vec![(None, 1.0)];
    if start > 0 {
        let mut dist = vec![0.0; v];
        let lp = model.conditional_log_probs(0, &x, ctx)?;
        for (t, l) in lp.iter().enumerate() {
            dist[t] = l.exp();
        }
        for pos in 1..start {
            let mut next = vec![0.0; v];
            for (a, pa) in dist.iter().enumerate() {
                x[pos - 1] = a;
                let lp = model.conditional_log_probs(pos, &x, ctx)?;
                for (t, l) in lp.iter().enumerate() {
                    next[t] += pa * l.exp();
                }
            }
            dist = next;
        }
        prev = dist.into_iter().enumerate().map(|(a, p)| (Some(a), p)).collect();
    }
    let combos = v.pow(len as u32);
    let mut log_terms = Vec::with_capacity(combos * prev.len());
    let mut fs = Vec::with_capacity(combos * prev.len());
    for (a, pa) in &prev {
        if *pa == 0.0 {
            continue;
        }
        if let Some(a) = a {
            x[start - 1] = *a;
        }
        for code in 0..combos {
            let mut c = code;
            let mut lp = pa.ln();
            for pos in start..start + len {
                x[pos] = c % v;
                c /= v;
            }
            for pos in start..start + len {
                lp += model.conditional_log_probs(pos, &x, ctx)?[x[pos]];
            }
            let f = constraint.evaluate(&x, &demo.side)?;
            log_terms.push(lp);
            fs.push(f);
        }
    }
    let log_u: Vec<f64> = log_terms.iter().zip(&fs).map(|(l, f)| l + alpha * f).collect();
    let log_z = log_sum_exp(&log_u);
    let expected_f = log_u.iter().zip(&fs).map(|(l, f)| (l - log_z).exp() * f).sum();
    let log_m2: Vec<f64> = log_terms.iter().zip(&fs).map(|(l, f)| l + 2.0 * alpha * f).collect();
    Ok(SpanMarginal { log_z, expected_f, log_second_moment: log_sum_exp(&log_m2) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfillMetric {
    Perplexity,
    ExactMatch,
}

/// Test metric plus exact diagnostics on a fixed evaluation subset.
pub struct InfillHooks<'a> {
    pub test: Vec<&'a InfillDemo>,
    pub eval: Vec<&'a InfillDemo>,
    pub metric: InfillMetric,
    /// Draw count used to express the exact ESS.
    pub n_samples: usize,
}

impl TrainHooks<AutoregressiveSequenceModel, MatchingConstraint> for InfillHooks<'_> {
    fn task_metric(&self, model: &AutoregressiveSequenceModel, _: &MatchingConstraint) -> Result<Option<f64>> {
        match self.metric {
            InfillMetric::Perplexity => perplexity(model, &self.test).map(Some),
            InfillMetric::ExactMatch => infill_exact_match(model, &self.test).map(Some),
        }
    }

    fn diagnostics(&self, model: &AutoregressiveSequenceModel, constraint: &MatchingConstraint, alpha: f64) -> Option<Result<PrDiagnostics>> {
        // the exact marginal handles one span; otherwise fall back to sampling
        if self.eval.iter().any(|d| d.side.spans.len() != 1) {
            return None;
        }
        let run = || {
            let mut acc = PrDiagnostics { neg_log_z: 0.0, kl_q_p: 0.0, constraint_ll: 0.0, z_hat: 0.0, ess: 0.0 };
            for d in &self.eval {
                let m = span_marginal(model, constraint, d, alpha)?;
                let f_demo = constraint.evaluate(&d.sample, &d.side)?;
                acc.neg_log_z -= m.log_z;
                acc.kl_q_p += alpha * m.expected_f - m.log_z;
                acc.constraint_ll += model.log_prob(&d.context, &d.sample)? + alpha * f_demo - m.log_z;
                acc.z_hat += m.log_z.exp();
                acc.ess += self.n_samples as f64 * (2.0 * m.log_z - m.log_second_moment).exp();
            }
            let k = self.eval.len() as f64;
            Ok(PrDiagnostics {
                neg_log_z: acc.neg_log_z / k,
                kl_q_p: acc.kl_q_p / k,
                constraint_ll: acc.constraint_ll / k,
                z_hat: acc.z_hat / k,
                ess: acc.ess / k,
            })
        };
        Some(run())
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ExplicitModel, GenerativeModel, ModelKind, SampleSpace, SpaceElement};
use crate::error::{Error, Result};
use crate::numeric::log_softmax;
use crate::params::{Layout, ParamVector};
use crate::rng::SeededStream;

const MAX_TABLE_PARAMS: u128 = 1 << 24;

/// How much of the prefix a conditional logit row is keyed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum History {
    /// The whole prefix (tables grow as `V^i`; meant for short sequences).
    Full,
    /// The last `k` tokens, padded with a begin-of-sequence symbol.
    Markov(usize),
}

/// Left-to-right token model with tabulated conditional logits indexed by
/// `(position, prefix key, context symbol)`.
///
/// The context is one symbol per position (e.g. the template token or a mask
/// marker); an empty context means symbol 0 everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoregressiveSequenceModel {
    vocab: usize,
    length: usize,
    history: History,
    context_symbols: usize,
    params: ParamVector,
    /// First row of each position's table.
    row_offsets: Vec<usize>,
}

impl AutoregressiveSequenceModel {
    /// All-zero logits, i.e. uniform conditionals.
    pub fn new(vocab: usize, length: usize, history: History, context_symbols: usize) -> Result<Self> {
        SampleSpace::sequence(vocab, length)?;
        if context_symbols == 0 {
            return Err(Error::InvalidArgument("context_symbols must be at least 1".into()));
        }
        let mut row_offsets = Vec::with_capacity(length);
        let mut rows: u128 = 0;
        for pos in 0..length {
            row_offsets.push(rows as usize);
            let keys = Self::keys_at(vocab, history, pos);
            rows += keys * context_symbols as u128;
            if rows * vocab as u128 > MAX_TABLE_PARAMS {
                return Err(Error::InvalidArgument(format!("logit table would exceed {MAX_TABLE_PARAMS} parameters")));
            }
        }
        let n = rows as usize * vocab;
        let params = ParamVector::zeros(Layout::contiguous([("logits", n)]));
        Ok(Self { vocab, length, history, context_symbols, params, row_offsets })
    }

    fn keys_at(vocab: usize, history: History, pos: usize) -> u128 {
        match history {
            History::Full => (vocab as u128).pow(pos as u32),
            History::Markov(k) => (vocab as u128 + 1).pow(k as u32),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn history(&self) -> History {
        self.history
    }

    pub fn context_symbols(&self) -> usize {
        self.context_symbols
    }

    fn prefix_key(&self, prefix: &[usize]) -> usize {
        match self.history {
            History::Full => prefix.iter().fold(0, |acc, t| acc * self.vocab + t),
            History::Markov(k) => {
                let mut key = 0;
                for m in 1..=k {
                    let sym = if prefix.len() >= m { prefix[prefix.len() - m] + 1 } else { 0 };
                    key = key * (self.vocab + 1) + sym;
                }
                key
            }
        }
    }

    fn context_symbol(&self, ctx: &[usize], pos: usize) -> Result<usize> {
        if ctx.is_empty() {
            return Ok(0);
        }
        if ctx.len() != self.length {
            return Err(Error::DimensionMismatch { expected: self.length, got: ctx.len() });
        }
        let sym = ctx[pos];
        if sym >= self.context_symbols {
            return Err(Error::OutOfSpace(format!("context symbol {sym} >= {}", self.context_symbols)));
        }
        Ok(sym)
    }

    /// Index of the first logit of the conditional used at `pos`.
    pub fn logit_offset(&self, pos: usize, prefix: &[usize], ctx: &[usize]) -> Result<usize> {
        let sym = self.context_symbol(ctx, pos)?;
        let row = self.row_offsets[pos] + self.prefix_key(&prefix[..pos]) * self.context_symbols + sym;
        Ok(row * self.vocab)
    }

    /// Log-probabilities of the next token at `pos` given `prefix[..pos]`.
    pub fn conditional_log_probs(&self, pos: usize, prefix: &[usize], ctx: &[usize]) -> Result<Vec<f64>> {
        let off = self.logit_offset(pos, prefix, ctx)?;
        Ok(log_softmax(&self.params.values()[off..off + self.vocab]))
    }

    fn check_sample(&self, x: &[usize]) -> Result<()> {
        if !x.to_vec().in_space(&self.space()) {
            return Err(Error::OutOfSpace(format!("{x:?} is not a length-{} sequence over {} tokens", self.length, self.vocab)));
        }
        Ok(())
    }

    /// Most likely token at each step, chosen left to right.
    pub fn greedy_decode(&self, ctx: &[usize]) -> Result<Vec<usize>> {
        let mut x = Vec::with_capacity(self.length);
        for pos in 0..self.length {
            let lp = self.conditional_log_probs(pos, &x, ctx)?;
            let best = lp.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b }).0;
            x.push(best);
        }
        Ok(x)
    }

    /// Mutable access to the raw logit table, e.g. for hand-built instances.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.params.block_mut("logits").expect("logits block")
    }
}

impl GenerativeModel for AutoregressiveSequenceModel {
    type Sample = Vec<usize>;
    type Context = Vec<usize>;

    fn kind(&self) -> ModelKind {
        ModelKind::Explicit
    }

    fn space(&self) -> SampleSpace {
        SampleSpace::TokenSequence { vocab: self.vocab, length: self.length }
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        Ok(Self {
            vocab: self.vocab,
            length: self.length,
            history: self.history,
            context_symbols: self.context_symbols,
            params,
            row_offsets: self.row_offsets.clone(),
        })
    }

    fn sample_one(&self, ctx: &Vec<usize>, rng: &mut SeededStream) -> Vec<usize> {
        let mut x = Vec::with_capacity(self.length);
        for pos in 0..self.length {
            let off = self.logit_offset(pos, &x, ctx).expect("context validated by caller");
            let logits = &self.params.values()[off..off + self.vocab];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = self.vocab - 1;
            for (t, l) in logits.iter().enumerate() {
                u -= (l - max).exp();
                if u < 0.0 {
                    pick = t;
                    break;
                }
            }
            x.push(pick);
        }
        x
    }
}

impl ExplicitModel for AutoregressiveSequenceModel {
    fn log_prob(&self, ctx: &Vec<usize>, x: &Vec<usize>) -> Result<f64> {
        self.check_sample(x)?;
        let mut total = 0.0;
        for pos in 0..self.length {
            total += self.conditional_log_probs(pos, x, ctx)?[x[pos]];
        }
        Ok(total)
    }

    fn accumulate_grad_log_prob(&self, ctx: &Vec<usize>, x: &Vec<usize>, scale: f64, acc: &mut [f64]) -> Result<()> {
        self.check_sample(x)?;
        if acc.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: acc.len() });
        }
        for pos in 0..self.length {
            let off = self.logit_offset(pos, x, ctx)?;
            let lp = log_softmax(&self.params.values()[off..off + self.vocab]);
            for (t, l) in lp.iter().enumerate() {
                let indicator = if t == x[pos] { 1.0 } else { 0.0 };
                acc[off + t] += scale * (indicator - l.exp());
            }
        }
        Ok(())
    }
}

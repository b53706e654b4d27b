//! Autoregressive decoding and exact re-scoring.

use rand::Rng;

use super::model::{log_softmax, BaseWeights, KvCache};
use super::state::{encode_prompt, ReasoningState, Thought};
use super::vocab::{render_tokens, EOS};
use crate::adapter::AdapterParams;
use crate::error::{Error, Result};

/// A prompt that has been run through the network once; any number of
/// continuations can be decoded from it.
pub struct PromptCache<'m> {
    model: &'m BaseWeights,
    adapter: Option<&'m AdapterParams>,
    cache: KvCache,
    last_row: Vec<f64>,
    pub prompt: Vec<u32>,
}

impl<'m> PromptCache<'m> {
    pub fn new(model: &'m BaseWeights, adapter: Option<&'m AdapterParams>, prompt: Vec<u32>) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        let mut cache = KvCache::new(&model.cfg);
        let (logits, _) = model.forward_segment(adapter, &mut cache, &prompt, false)?;
        let v = model.cfg.vocab;
        let last_row = logits[logits.len() - v..].to_vec();
        Ok(PromptCache {
            model,
            adapter,
            cache,
            last_row,
            prompt,
        })
    }

    pub fn for_state(
        model: &'m BaseWeights,
        adapter: Option<&'m AdapterParams>,
        state: &ReasoningState,
        max_new_tokens: usize,
    ) -> Result<Self> {
        Self::new(model, adapter, encode_prompt(state, max_new_tokens)?)
    }

    fn decode(
        &self,
        max_new_tokens: usize,
        mut choose: impl FnMut(&[f64]) -> u32,
    ) -> Result<Thought> {
        let mut cache = self.cache.clone();
        let mut row = self.last_row.clone();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let room = self.model.cfg.max_ctx - cache.len;
        let cap = max_new_tokens.min(room);
        while tokens.len() < cap {
            let tok = choose(&row);
            let lp = log_softmax(&row);
            logprobs.push(lp[tok as usize]);
            tokens.push(tok);
            if tok == EOS || tokens.len() == cap {
                break;
            }
            let (logits, _) = self.model.forward_segment(self.adapter, &mut cache, &[tok], false)?;
            row = logits;
        }
        Ok(Thought {
            text: render_tokens(&tokens),
            tokens,
            gen_logprobs: logprobs,
        })
    }

    /// Samples from `softmax(logits / temperature)`; stored log-probabilities
    /// are untempered.
    pub fn sample(&self, temperature: f64, max_new_tokens: usize, rng: &mut impl Rng) -> Result<Thought> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be > 0")));
        }
        let mut probs = Vec::with_capacity(self.model.cfg.vocab);
        self.decode(max_new_tokens, |row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            probs.clear();
            let mut z = 0.0;
            for v in row {
                let p = ((v - max) / temperature).exp();
                z += p;
                probs.push(p);
            }
            let u: f64 = rng.gen::<f64>() * z;
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            // u landed on the rounding edge; fall back to the last nonzero mass
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(0) as u32
        })
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&self, max_new_tokens: usize) -> Result<Thought> {
        self.decode(max_new_tokens, argmax)
    }
}

pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn sample_thought(
    model: &BaseWeights,
    state: &ReasoningState,
    adapter: Option<&AdapterParams>,
    temperature: f64,
    max_new_tokens: usize,
    rng: &mut impl Rng,
) -> Result<Thought> {
    PromptCache::for_state(model, adapter, state, max_new_tokens)?.sample(temperature, max_new_tokens, rng)
}

pub fn greedy_decode(
    model: &BaseWeights,
    state: &ReasoningState,
    adapter: Option<&AdapterParams>,
    max_new_tokens: usize,
) -> Result<Thought> {
    PromptCache::for_state(model, adapter, state, max_new_tokens)?.greedy(max_new_tokens)
}

/// Log-probabilities of `tokens[prefix_len..]`, each under the logits of the
/// preceding position.
pub fn rescore(
    model: &BaseWeights,
    tokens: &[u32],
    prefix_len: usize,
    adapter: Option<&AdapterParams>,
) -> Result<Vec<f64>> {
    if prefix_len == 0 || prefix_len >= tokens.len() {
        return Err(Error::Config(format!(
            "prefix_len {prefix_len} must be in 1..{}",
            tokens.len()
        )));
    }
    let v = model.cfg.vocab;
    let logits = model.forward(&tokens[..tokens.len() - 1], adapter)?;
    Ok((prefix_len..tokens.len())
        .map(|p| log_softmax(&logits[(p - 1) * v..p * v])[tokens[p] as usize])
        .collect())
}

/// Full per-position log-distributions for positions `prefix_len..` (each
/// row is the distribution over the token at that position).
pub fn log_distributions(
    model: &BaseWeights,
    tokens: &[u32],
    prefix_len: usize,
    adapter: Option<&AdapterParams>,
) -> Result<Vec<Vec<f64>>> {
    let v = model.cfg.vocab;
    let logits = model.forward(&tokens[..tokens.len() - 1], adapter)?;
    Ok((prefix_len..tokens.len())
        .map(|p| log_softmax(&logits[(p - 1) * v..p * v]))
        .collect())
}

//! Reasoning states and their token layout:
//!
//! ```text
//! <BOS> (<IN> v , v … <OUT> e)*  ( <SEP> thought-tokens feedback-tokens )*
//! ```
//!
//! A generation prompt is the state encoding followed by `<SEP>`, so appending
//! a (thought, feedback) entry extends the previous prompt in place.

use serde::{Deserialize, Serialize};

use super::vocab::{self, COMMA, FAIL, IN, OUT, PASS, SEP};
use crate::dsl::{RewardReport, TaskInstance, TestOutcome};
use crate::error::{Error, Result};

pub const MAX_CONTEXT: usize = 512;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thought {
    pub tokens: Vec<u32>,
    pub text: String,
    /// Untempered log-probabilities of each generated token under the policy
    /// that produced it.
    pub gen_logprobs: Vec<f64>,
}

impl Thought {
    pub fn mean_logprob(&self) -> f64 {
        if self.gen_logprobs.is_empty() {
            0.0
        } else {
            self.gen_logprobs.iter().sum::<f64>() / self.gen_logprobs.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub tokens: Vec<u32>,
}

impl Feedback {
    pub fn from_report(report: &RewardReport) -> Self {
        let mut tokens: Vec<u32> = report
            .per_test
            .iter()
            .map(|o| match o {
                TestOutcome::Pass => PASS,
                TestOutcome::Fail => FAIL,
                TestOutcome::Error => vocab::ERR,
            })
            .collect();
        vocab::push_int(&mut tokens, report.n_pass as i64);
        Feedback { tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub thought: Vec<u32>,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningState {
    pub task: TaskInstance,
    pub history: Vec<HistoryEntry>,
}

impl ReasoningState {
    pub fn new(task: TaskInstance) -> Self {
        ReasoningState {
            task,
            history: Vec::new(),
        }
    }

    pub fn with_entry(&self, thought: &Thought, feedback: Feedback) -> Self {
        let mut next = self.clone();
        next.push(thought, feedback);
        next
    }

    pub fn push(&mut self, thought: &Thought, feedback: Feedback) {
        self.history.push(HistoryEntry {
            thought: thought.tokens.clone(),
            feedback,
        });
    }
}

pub fn encode_task(task: &TaskInstance) -> Vec<u32> {
    let mut out = vec![vocab::BOS];
    for test in &task.tests {
        out.push(IN);
        for (i, v) in test.input.iter().enumerate() {
            if i > 0 {
                out.push(COMMA);
            }
            vocab::push_int(&mut out, *v);
        }
        out.push(OUT);
        vocab::push_int(&mut out, test.expected);
    }
    out
}

fn entry_len(e: &HistoryEntry) -> usize {
    1 + e.thought.len() + e.feedback.tokens.len()
}

/// Encodes `state` into at most `limit` tokens, dropping whole history
/// entries oldest-first. The task segment is never dropped.
pub fn encode_state_within(state: &ReasoningState, limit: usize) -> Result<Vec<u32>> {
    let mut out = encode_task(&state.task);
    if out.len() > limit {
        return Err(Error::ContextOverflow {
            len: out.len(),
            max: limit,
        });
    }
    let mut total = out.len() + state.history.iter().map(entry_len).sum::<usize>();
    let mut skip = 0;
    while total > limit {
        total -= entry_len(&state.history[skip]);
        skip += 1;
    }
    for e in &state.history[skip..] {
        out.push(SEP);
        out.extend_from_slice(&e.thought);
        out.extend_from_slice(&e.feedback.tokens);
    }
    Ok(out)
}

pub fn encode_state(state: &ReasoningState) -> Result<Vec<u32>> {
    encode_state_within(state, MAX_CONTEXT)
}

/// The generation prompt: state encoding plus `<SEP>`, leaving room for
/// `max_new_tokens` generated tokens inside the context window.
pub fn encode_prompt(state: &ReasoningState, max_new_tokens: usize) -> Result<Vec<u32>> {
    let limit = MAX_CONTEXT
        .checked_sub(max_new_tokens + 1)
        .ok_or_else(|| Error::Config(format!("max_new_tokens {max_new_tokens} too large")))?;
    let mut out = encode_state_within(state, limit)?;
    out.push(SEP);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{evaluate_text, gen_task, TestCase};

    fn thought(text_tokens: Vec<u32>) -> Thought {
        Thought {
            text: vocab::render_tokens(&text_tokens),
            gen_logprobs: vec![0.0; text_tokens.len()],
            tokens: text_tokens,
        }
    }

    #[test]
    fn empty_history_is_bos_plus_tests() {
        let task = TaskInstance {
            task_id: "x".into(),
            difficulty: 1,
            tests: vec![
                TestCase { input: vec![3, -4], expected: 12 },
                TestCase { input: vec![0, 1], expected: -1 },
            ],
            hidden_solution: None,
        };
        let enc = encode_state(&ReasoningState::new(task)).unwrap();
        let d = |n: u32| vocab::DIGIT0 + n;
        assert_eq!(
            enc,
            vec![
                vocab::BOS, IN, d(3), COMMA, vocab::NEG, d(4), OUT, d(1), d(2),
                IN, d(0), COMMA, d(1), OUT, vocab::NEG, d(1)
            ]
        );
    }

    #[test]
    fn history_extends_previous_encoding() {
        let task = gen_task(3, 2).unwrap();
        let s0 = ReasoningState::new(task.clone());
        let th = thought(vec![vocab::DUP, vocab::MUL, vocab::EOS]);
        let fb = Feedback::from_report(&evaluate_text(&th.text, &task));
        let s1 = s0.with_entry(&th, fb);
        let e0 = encode_state(&s0).unwrap();
        let e1 = encode_state(&s1).unwrap();
        assert!(e1.starts_with(&e0));
        assert_eq!(e1[e0.len()], SEP);
        let p0 = encode_prompt(&s0, 96).unwrap();
        assert!(e1.starts_with(&p0));
    }

    #[test]
    fn oversized_history_drops_oldest_entries() {
        let task = gen_task(11, 3).unwrap();
        let task_enc = encode_task(&task);
        let mut s = ReasoningState::new(task.clone());
        for i in 0..20 {
            let mut toks = vec![vocab::PUSH, vocab::DIGIT0 + (i % 10) as u32];
            toks.extend(std::iter::repeat(vocab::DUP).take(30));
            toks.push(vocab::EOS);
            let th = thought(toks);
            let fb = Feedback::from_report(&evaluate_text(&th.text, &task));
            s.push(&th, fb);
        }
        let enc = encode_state(&s).unwrap();
        assert!(enc.len() <= MAX_CONTEXT);
        assert!(enc.starts_with(&task_enc));
        // the newest entry survives, ending with its feedback
        let last = &s.history[19];
        assert!(enc.ends_with(&last.feedback.tokens));
        let tail_start = enc.len() - last.feedback.tokens.len() - last.thought.len() - 1;
        assert_eq!(enc[tail_start], SEP);
        // and the oldest was dropped
        let full: usize = task_enc.len() + s.history.iter().map(entry_len).sum::<usize>();
        assert!(full > MAX_CONTEXT);
    }

    #[test]
    fn task_larger_than_context_is_an_error() {
        let task = gen_task(1, 1).unwrap();
        let s = ReasoningState::new(task);
        assert!(matches!(
            encode_state_within(&s, 5),
            Err(Error::ContextOverflow { .. })
        ));
    }
}

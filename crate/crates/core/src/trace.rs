//! Per-solve event trace. Contains no wall-clock data, so two runs with the
//! same inputs produce byte-identical traces.

use serde::{Deserialize, Serialize};

use crate::dsl::Fault;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Select {
        phase: usize,
        path: Vec<usize>,
    },
    Exhausted {
        phase: usize,
        node: usize,
    },
    Generate {
        phase: usize,
        node: usize,
        parent: usize,
        tokens: usize,
        mean_logprob: f64,
        text: String,
    },
    Evaluate {
        phase: usize,
        node: usize,
        reward: f64,
        n_pass: usize,
        fault: Option<Fault>,
        pruned: bool,
    },
    Update {
        phase: usize,
        advantages: Vec<f64>,
        loss: f64,
        post_loss: f64,
        post_kl_ref: f64,
        max_ratio: f64,
        clip_fraction: f64,
    },
    RefSync {
        phase: usize,
        step: u64,
    },
    Commit {
        phase: usize,
        reward: f64,
        text: String,
    },
    Finish {
        solved: bool,
        reward: f64,
        program: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<Event>,
}

impl Trace {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    /// One JSON document per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

/// Index and both sides of the first differing event, compared by their
/// serialized form; a missing event on one side is reported as `None`.
pub fn first_divergence(a: &[Event], b: &[Event]) -> Option<(usize, Option<String>, Option<String>)> {
    let ser = |e: &Event| serde_json::to_string(e).expect("events serialize");
    for i in 0..a.len().max(b.len()) {
        let x = a.get(i).map(ser);
        let y = b.get(i).map(ser);
        if x != y {
            return Some((i, x, y));
        }
    }
    None
}

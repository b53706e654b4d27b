//! PUCT tree search over complete-program thoughts.
//!
//! Every node other than the root holds one sampled program together with
//! its unit-test feedback. A phase descends by PUCT to a leaf, expands it
//! with `k` sampled children, evaluates and backpropagates each child, and
//! hands the sibling set back as a GRPO group.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::dsl::{evaluate_text, RewardReport};
use crate::error::{Error, Result};
use crate::evolution::Meter;
use crate::grpo::{GroupBuffer, Trajectory};
use crate::policy::{BaseWeights, Feedback, PromptCache, ReasoningState, Thought, DEFAULT_MAX_NEW_TOKENS};
use crate::trace::{Event, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub c_puct: f64,
    pub k: usize,
    pub max_depth: usize,
    /// Simulation budget M; each phase consumes one.
    pub max_simulations: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            c_puct: 1.414,
            k: 3,
            max_depth: 8,
            max_simulations: 20,
            temperature: 0.7,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_simulations == 0 || self.max_depth == 0 {
            return Err(Error::Config("k, max_simulations and max_depth must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.c_puct >= 0.0) {
            return Err(Error::Config("temperature must be > 0 and c_puct ≥ 0".into()));
        }
        Ok(())
    }

    /// Cap on generated nodes for one solve.
    pub fn node_budget(&self) -> usize {
        self.max_simulations * self.k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub thought: Option<Thought>,
    pub feedback: Option<Feedback>,
    pub report: Option<RewardReport>,
    pub reward: f64,
    pub n: u64,
    pub w: f64,
    pub prior: f64,
    pub children: Vec<usize>,
    pub depth: usize,
    pub pruned: bool,
    /// No selectable descendant remains (set during descent).
    pub exhausted: bool,
}

impl SearchNode {
    pub fn q(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.w / self.n as f64
        }
    }

    fn selectable(&self) -> bool {
        !self.pruned && !self.exhausted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackpropRecord {
    /// Root first.
    pub path: Vec<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub backprop_log: Vec<BackpropRecord>,
}

/// What PUCT sees of a child.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildView {
    pub q: f64,
    pub n: u64,
    pub prior: f64,
    pub selectable: bool,
}

/// `Q + c·P·√(Σ_b N_b)/(1 + N)`, the sum running over all children.
pub fn puct_scores(children: &[ChildView], c_puct: f64) -> Vec<f64> {
    let total: u64 = children.iter().map(|c| c.n).sum();
    let sqrt_total = (total as f64).sqrt();
    children
        .iter()
        .map(|c| {
            let q = if c.n == 0 { 0.0 } else { c.q };
            q + c_puct * c.prior * sqrt_total / (1.0 + c.n as f64)
        })
        .collect()
}

/// Index of the best selectable child; ties go to the lowest index.
pub fn puct_select(children: &[ChildView], c_puct: f64) -> Option<usize> {
    let scores = puct_scores(children, c_puct);
    let mut best: Option<usize> = None;
    for (i, c) in children.iter().enumerate() {
        if c.selectable && best.map_or(true, |b| scores[i] > scores[b]) {
            best = Some(i);
        }
    }
    best
}

impl Default for SearchTree {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchTree {
    pub fn new() -> Self {
        SearchTree {
            nodes: vec![SearchNode {
                id: 0,
                parent: None,
                thought: None,
                feedback: None,
                report: None,
                reward: 0.0,
                n: 0,
                w: 0.0,
                prior: 1.0,
                children: Vec::new(),
                depth: 0,
                pruned: false,
                exhausted: false,
            }],
            backprop_log: Vec::new(),
        }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// Node ids from the root down to `id`.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// The root state extended by every (thought, feedback) on the path.
    pub fn state_of(&self, id: usize, root_state: &ReasoningState) -> ReasoningState {
        let mut state = root_state.clone();
        for &n in &self.path_to(id)[1..] {
            let node = &self.nodes[n];
            state.push(node.thought.as_ref().unwrap(), node.feedback.clone().unwrap());
        }
        state
    }

    pub fn child_views(&self, id: usize) -> Vec<ChildView> {
        self.nodes[id]
            .children
            .iter()
            .map(|&c| {
                let n = &self.nodes[c];
                ChildView {
                    q: n.q(),
                    n: n.n,
                    prior: n.prior,
                    selectable: n.selectable(),
                }
            })
            .collect()
    }

    pub fn select_child(&self, id: usize, c_puct: f64) -> Result<usize> {
        let views = self.child_views(id);
        puct_select(&views, c_puct)
            .map(|i| self.nodes[id].children[i])
            .ok_or_else(|| Error::Search(format!("node {id} has no selectable child")))
    }

    /// Adds `reward` to every node from `leaf` up to the root.
    pub fn backpropagate(&mut self, leaf: usize, reward: f64) {
        let path = self.path_to(leaf);
        for &id in &path {
            let n = &mut self.nodes[id];
            n.n += 1;
            n.w += reward;
        }
        self.backprop_log.push(BackpropRecord { path, reward });
    }

    /// (N, Q) of every node recomputed from the backprop log alone.
    pub fn replay_log(&self) -> Vec<(u64, f64)> {
        let mut sums = vec![(0u64, 0.0f64); self.nodes.len()];
        for rec in &self.backprop_log {
            for &id in &rec.path {
                sums[id].0 += 1;
                sums[id].1 += rec.reward;
            }
        }
        sums.into_iter()
            .map(|(n, w)| (n, if n == 0 { 0.0 } else { w / n as f64 }))
            .collect()
    }

    fn refresh_priors(&mut self, id: usize) {
        let lps: Vec<f64> = self.nodes[id]
            .children
            .iter()
            .map(|&c| self.nodes[c].thought.as_ref().unwrap().mean_logprob())
            .collect();
        let max = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lps.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, c) in self.nodes[id].children.clone().into_iter().enumerate() {
            self.nodes[c].prior = exps[i] / z;
        }
    }

    /// Descends by PUCT to a node to expand. Nodes at maximum depth and
    /// nodes whose children are all unselectable are marked exhausted and
    /// the descent restarts; the root itself is always expandable.
    pub fn descend(&mut self, config: &SearchConfig, phase: usize, trace: &mut Trace) -> usize {
        loop {
            let mut node = 0;
            let mut restart = false;
            while !self.nodes[node].children.is_empty() {
                match self.select_child(node, config.c_puct) {
                    Ok(c) => node = c,
                    Err(_) if node == 0 => break,
                    Err(_) => {
                        self.nodes[node].exhausted = true;
                        trace.push(Event::Exhausted { phase, node });
                        restart = true;
                        break;
                    }
                }
            }
            if restart {
                continue;
            }
            if node != 0 && self.nodes[node].depth >= config.max_depth {
                self.nodes[node].exhausted = true;
                trace.push(Event::Exhausted { phase, node });
                continue;
            }
            trace.push(Event::Select {
                phase,
                path: self.path_to(node),
            });
            return node;
        }
    }

    /// JSON dump of the tree for inspection.
    pub fn dump(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.nodes
                .iter()
                .map(|n| {
                    serde_json::json!({
                        "id": n.id,
                        "parent": n.parent,
                        "depth": n.depth,
                        "reward": n.reward,
                        "N": n.n,
                        "Q": n.q(),
                        "P": n.prior,
                        "pruned": n.pruned,
                        "thought_text": n.thought.as_ref().map(|t| t.text.clone()),
                    })
                })
                .collect(),
        )
    }
}

/// Result of one expansion.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub parent: usize,
    pub prefix: Vec<u32>,
    pub children: Vec<usize>,
    /// First child that passed every test; generation stopped there.
    pub solved: Option<usize>,
}

/// Samples up to `k` children of `node`, evaluating and backpropagating each
/// as soon as it exists. Stops early on a full-reward child.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    tree: &mut SearchTree,
    node: usize,
    root_state: &ReasoningState,
    model: &BaseWeights,
    adapter: Option<&AdapterParams>,
    config: &SearchConfig,
    rng: &mut impl Rng,
    meter: &mut Meter,
    trace: &mut Trace,
    phase: usize,
) -> Result<Expansion> {
    let depth = tree.nodes[node].depth;
    if node != 0 && depth >= config.max_depth {
        return Err(Error::Search(format!("node {node} is at maximum depth {depth}")));
    }
    let state = tree.state_of(node, root_state);
    let t0 = Instant::now();
    let cache = PromptCache::for_state(model, adapter, &state, config.max_new_tokens)?;
    meter.forward_prompt(cache.prompt.len(), t0.elapsed());
    let mut children = Vec::with_capacity(config.k);
    let mut solved = None;
    for _ in 0..config.k {
        let t0 = Instant::now();
        let thought = cache.sample(config.temperature, config.max_new_tokens, rng)?;
        meter.generated(thought.tokens.len(), t0.elapsed());
        let report = evaluate_text(&thought.text, &state.task);
        let id = tree.nodes.len();
        let pruned = report.reward == 0.0 && report.fault.is_some();
        trace.push(Event::Generate {
            phase,
            node: id,
            parent: node,
            tokens: thought.tokens.len(),
            mean_logprob: thought.mean_logprob(),
            text: thought.text.clone(),
        });
        trace.push(Event::Evaluate {
            phase,
            node: id,
            reward: report.reward,
            n_pass: report.n_pass,
            fault: report.fault,
            pruned,
        });
        tree.nodes.push(SearchNode {
            id,
            parent: Some(node),
            feedback: Some(Feedback::from_report(&report)),
            reward: report.reward,
            thought: Some(thought),
            report: Some(report),
            n: 0,
            w: 0.0,
            prior: 0.0,
            children: Vec::new(),
            depth: depth + 1,
            pruned,
            exhausted: false,
        });
        tree.nodes[node].children.push(id);
        let reward = tree.nodes[id].reward;
        tree.backpropagate(id, reward);
        children.push(id);
        if reward == 1.0 {
            solved = Some(id);
            break;
        }
    }
    tree.refresh_priors(node);
    Ok(Expansion {
        parent: node,
        prefix: cache.prompt.clone(),
        children,
        solved,
    })
}

pub enum PhaseOutcome {
    Solved { node: usize },
    Group(GroupBuffer),
}

/// One simulation: descend, expand, and return either the solving node or
/// the new sibling group.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    tree: &mut SearchTree,
    root_state: &ReasoningState,
    model: &BaseWeights,
    adapter: Option<&AdapterParams>,
    config: &SearchConfig,
    rng: &mut impl Rng,
    meter: &mut Meter,
    trace: &mut Trace,
    phase: usize,
) -> Result<PhaseOutcome> {
    if meter.ledger.simulations >= config.max_simulations {
        return Err(Error::Search("simulation budget exhausted".into()));
    }
    meter.begin_phase(phase);
    let leaf = tree.descend(config, phase, trace);
    let exp = expand(tree, leaf, root_state, model, adapter, config, rng, meter, trace, phase)?;
    meter.ledger.simulations += 1;
    if let Some(node) = exp.solved {
        return Ok(PhaseOutcome::Solved { node });
    }
    let trajectories = exp
        .children
        .iter()
        .map(|&c| {
            let n = &tree.nodes[c];
            let th = n.thought.as_ref().unwrap();
            Trajectory {
                thought: th.tokens.clone(),
                old_logprobs: th.gen_logprobs.clone(),
                reward: n.reward,
            }
        })
        .collect();
    Ok(PhaseOutcome::Group(GroupBuffer::new(exp.parent, exp.prefix, trajectories)?))
}

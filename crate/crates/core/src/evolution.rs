//! The per-task loop: search a phase, internalize the sibling group into the
//! transient adapter, commit a greedy thought into the root history, repeat
//! until solved or out of simulations, then discard the adapter.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdamConfig, AdapterParams, DEFAULT_ALPHA, DEFAULT_RANK};
use crate::dsl::{evaluate_text, TaskInstance};
use crate::error::{Error, Result};
use crate::grpo::{internalize, AdaptationState, GrpoConfig};
use crate::policy::{BaseWeights, Feedback, PromptCache, ReasoningState};
use crate::search::{run_phase, PhaseOutcome, SearchConfig, SearchTree};
use crate::trace::{first_divergence, Event, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub search: SearchConfig,
    pub grpo: GrpoConfig,
    pub adam: AdamConfig,
    pub rank: usize,
    pub alpha: f64,
    /// Off gives the search-only ablation: no adapter, no updates.
    pub adaptation_enabled: bool,
    /// Outer-step cap; `None` runs until the simulation budget is spent.
    pub max_outer_steps: Option<usize>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            search: SearchConfig::default(),
            grpo: GrpoConfig::default(),
            adam: AdamConfig::default(),
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            adaptation_enabled: true,
            max_outer_steps: None,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.grpo.validate()?;
        if self.rank == 0 || !(self.adam.lr > 0.0) {
            return Err(Error::Config("rank and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// SHA-256 over the canonical JSON form (object keys sorted).
pub fn fingerprint_of(value: &impl Serialize) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    // serde_json's default map is ordered, so re-serializing sorts keys
    let canonical = serde_json::to_string(&v).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Deterministic cost counters for one phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLedger {
    pub phase: usize,
    pub nodes: usize,
    pub tokens: u64,
    pub forward_count: u64,
    pub forward_positions: u64,
    pub backward_count: u64,
    pub backward_positions: u64,
}

/// Deterministic cost counters for a solve. Wall-clock time lives in
/// [`WallClock`] so reports stay byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub simulations: usize,
    /// One per decoded sequence (search child or committed thought).
    pub forward_count: u64,
    /// Token positions pushed through the network during generation.
    pub forward_positions: u64,
    /// One per adapter backward pass (each internalization runs E of them).
    pub backward_count: u64,
    pub backward_positions: u64,
    pub nodes_generated: usize,
    pub tokens_generated: u64,
    pub commits: usize,
    pub phases: Vec<PhaseLedger>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseWall {
    pub forward_ns: u64,
    pub backward_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_ns: u64,
    pub forward_ns: u64,
    pub backward_ns: u64,
    pub phases: Vec<PhaseWall>,
}

#[derive(Debug, Clone, Default)]
pub struct Meter {
    pub ledger: BudgetLedger,
    pub wall: WallClock,
}

fn ns(d: Duration) -> u64 {
    d.as_nanos() as u64
}

impl Meter {
    pub fn begin_phase(&mut self, phase: usize) {
        self.ledger.phases.push(PhaseLedger {
            phase,
            ..Default::default()
        });
        self.wall.phases.push(PhaseWall::default());
    }

    fn phase(&mut self) -> (&mut PhaseLedger, &mut PhaseWall) {
        if self.ledger.phases.is_empty() {
            self.begin_phase(0);
        }
        (self.ledger.phases.last_mut().unwrap(), self.wall.phases.last_mut().unwrap())
    }

    pub fn forward_prompt(&mut self, positions: usize, elapsed: Duration) {
        self.ledger.forward_positions += positions as u64;
        self.wall.forward_ns += ns(elapsed);
        let (p, w) = self.phase();
        p.forward_positions += positions as u64;
        w.forward_ns += ns(elapsed);
    }

    /// A search child was decoded.
    pub fn generated(&mut self, tokens: usize, elapsed: Duration) {
        self.decoded(tokens, elapsed);
        self.ledger.nodes_generated += 1;
        self.phase().0.nodes += 1;
    }

    /// Any sequence was decoded (search child or commit).
    pub fn decoded(&mut self, tokens: usize, elapsed: Duration) {
        let positions = tokens.saturating_sub(1) as u64;
        self.ledger.forward_count += 1;
        self.ledger.forward_positions += positions;
        self.ledger.tokens_generated += tokens as u64;
        self.wall.forward_ns += ns(elapsed);
        let (p, w) = self.phase();
        p.forward_count += 1;
        p.forward_positions += positions;
        p.tokens += tokens as u64;
        w.forward_ns += ns(elapsed);
    }

    pub fn backward(&mut self, passes: u64, positions: u64, elapsed: Duration) {
        self.ledger.backward_count += passes;
        self.ledger.backward_positions += positions;
        self.wall.backward_ns += ns(elapsed);
        let (p, w) = self.phase();
        p.backward_count += passes;
        p.backward_positions += positions;
        w.backward_ns += ns(elapsed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub phase: usize,
    pub text: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub task_id: String,
    pub task_fingerprint: String,
    pub task: TaskInstance,
    pub solved: bool,
    pub final_program: String,
    pub reward: f64,
    pub outer_steps: usize,
    pub internalizations: usize,
    pub ledger: BudgetLedger,
    pub committed: Vec<CommitRecord>,
    pub rng_seed: u64,
    pub config: EvolutionConfig,
    pub config_fingerprint: String,
    pub weights_checksum: String,
}

pub struct SolveOutcome {
    pub report: SolveReport,
    pub trace: Trace,
    pub wall: WallClock,
    pub tree: SearchTree,
    /// Task plus every committed thought and its feedback.
    pub root_state: ReasoningState,
}

struct Best {
    reward: f64,
    text: String,
}

impl Best {
    fn offer(&mut self, reward: f64, text: &str) {
        if reward > self.reward {
            self.reward = reward;
            self.text = text.to_string();
        }
    }
}

/// Runs the full loop on one task. Identical `(model, task, config, seed)`
/// give identical reports and traces.
pub fn solve(model: &BaseWeights, task: &TaskInstance, config: &EvolutionConfig, seed: u64) -> Result<SolveOutcome> {
    config.validate()?;
    if task.tests.is_empty() {
        return Err(Error::Config(format!("task {} has no tests", task.task_id)));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapt = config.adaptation_enabled.then(|| {
        let a = AdapterParams::init(&model.cfg, config.rank, config.alpha, seed ^ 0xA5A5_5A5A_D00D_F00D);
        AdaptationState::new(a, config.adam)
    });
    let mut root = ReasoningState::new(task.clone());
    let mut tree = SearchTree::new();
    let mut meter = Meter::default();
    let mut trace = Trace::default();
    let mut best = Best {
        reward: -1.0,
        text: String::new(),
    };
    let mut committed = Vec::new();
    let mut solved = false;
    let mut internalizations = 0;
    let steps = config
        .max_outer_steps
        .unwrap_or(config.search.max_simulations)
        .min(config.search.max_simulations);
    let mut outer_steps = 0;

    for phase in 0..steps {
        outer_steps += 1;
        let before = tree.nodes.len();
        let outcome = run_phase(
            &mut tree,
            &root,
            model,
            adapt.as_ref().map(|a| &a.adapter),
            &config.search,
            &mut rng,
            &mut meter,
            &mut trace,
            phase,
        )?;
        for n in &tree.nodes[before..] {
            best.offer(n.reward, &n.thought.as_ref().unwrap().text);
        }
        let mut group = match outcome {
            PhaseOutcome::Solved { .. } => {
                solved = true;
                break;
            }
            PhaseOutcome::Group(g) => g,
        };
        if let Some(state) = adapt.as_mut() {
            let t0 = Instant::now();
            let diag = internalize(model, &mut group, state, &config.grpo)?;
            let per_pass = group.prefix.len() as u64 - 1
                + group.trajectories.iter().map(|t| t.thought.len() as u64).sum::<u64>();
            meter.backward(config.grpo.epochs as u64, config.grpo.epochs as u64 * per_pass, t0.elapsed());
            internalizations += 1;
            trace.push(Event::Update {
                phase,
                advantages: diag.advantages.clone(),
                loss: diag.epochs[0].terms.loss,
                post_loss: diag.post_loss,
                post_kl_ref: diag.post.mean_kl_ref,
                max_ratio: diag.epochs.iter().map(|e| e.stats.max_ratio).fold(0.0, f64::max),
                clip_fraction: diag.epochs.last().unwrap().stats.clip_fraction,
            });
            if diag.ref_synced {
                trace.push(Event::RefSync {
                    phase,
                    step: state.reference.step,
                });
            }
        }
        // commit the evolved policy's greedy thought into the root history
        let adapter = adapt.as_ref().map(|a| &a.adapter);
        let t0 = Instant::now();
        let cache = PromptCache::for_state(model, adapter, &root, config.search.max_new_tokens)?;
        meter.forward_prompt(cache.prompt.len(), t0.elapsed());
        let t0 = Instant::now();
        let thought = cache.greedy(config.search.max_new_tokens)?;
        meter.decoded(thought.tokens.len(), t0.elapsed());
        meter.ledger.commits += 1;
        let report = evaluate_text(&thought.text, task);
        trace.push(Event::Commit {
            phase,
            reward: report.reward,
            text: thought.text.clone(),
        });
        best.offer(report.reward, &thought.text);
        committed.push(CommitRecord {
            phase,
            text: thought.text.clone(),
            reward: report.reward,
        });
        root.push(&thought, Feedback::from_report(&report));
        if report.solved() {
            solved = true;
            break;
        }
    }
    if let Some(state) = adapt {
        state.discard();
    }
    let reward = best.reward.max(0.0);
    trace.push(Event::Finish {
        solved,
        reward,
        program: best.text.clone(),
    });
    let mut wall = meter.wall;
    wall.total_ns = ns(started.elapsed());
    Ok(SolveOutcome {
        report: SolveReport {
            task_id: task.task_id.clone(),
            task_fingerprint: task.fingerprint(),
            task: task.clone(),
            solved,
            final_program: best.text,
            reward,
            outer_steps,
            internalizations,
            ledger: meter.ledger,
            committed,
            rng_seed: seed,
            config: *config,
            config_fingerprint: config.fingerprint(),
            weights_checksum: model.checksum(),
        },
        trace,
        wall,
        tree,
        root_state: root,
    })
}

/// Predicted versus measured cost of a solve under
/// `total ≈ M · (1 + ρ) · Cost_fwd`, with ρ = Cost_bwd / Cost_fwd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEstimate {
    pub phases: usize,
    /// Mean forward (generation) time per phase.
    pub cost_fwd_ms: f64,
    /// Mean adapter-update time per phase.
    pub cost_bwd_ms: f64,
    pub rho: f64,
    pub predicted_ms: f64,
    pub actual_ms: f64,
    /// `|predicted − actual| / actual`.
    pub relative_error: f64,
}

impl BudgetEstimate {
    pub fn rho_rounded(&self) -> f64 {
        (self.rho * 100.0).round() / 100.0
    }
}

pub fn estimate_budget(wall: &WallClock) -> Result<BudgetEstimate> {
    let m = wall.phases.len();
    if m == 0 {
        return Err(Error::Config("ledger has no phases".into()));
    }
    let fwd_ms = wall.forward_ns as f64 / 1e6;
    let bwd_ms = wall.backward_ns as f64 / 1e6;
    if !(fwd_ms > 0.0) {
        return Err(Error::Config("ledger has no forward cost".into()));
    }
    let cost_fwd = fwd_ms / m as f64;
    let rho = bwd_ms / fwd_ms;
    let predicted = m as f64 * (1.0 + rho) * cost_fwd;
    let actual = wall.total_ns as f64 / 1e6;
    Ok(BudgetEstimate {
        phases: m,
        cost_fwd_ms: cost_fwd,
        cost_bwd_ms: bwd_ms / m as f64,
        rho,
        predicted_ms: predicted,
        actual_ms: actual,
        relative_error: if actual > 0.0 { (predicted - actual).abs() / actual } else { f64::INFINITY },
    })
}

/// Aggregates several solves' wall clocks into one budget estimate.
pub fn merge_walls<'a>(walls: impl IntoIterator<Item = &'a WallClock>) -> WallClock {
    let mut out = WallClock::default();
    for w in walls {
        out.total_ns += w.total_ns;
        out.forward_ns += w.forward_ns;
        out.backward_ns += w.backward_ns;
        out.phases.extend(w.phases.iter().cloned());
    }
    out
}

/// Re-executes a stored solve and demands byte equality: first of the event
/// trace (when given), then of the report itself.
pub fn replay(model: &BaseWeights, report: &SolveReport, stored_trace: Option<&[Event]>) -> Result<SolveOutcome> {
    let found = model.checksum();
    if found != report.weights_checksum {
        return Err(Error::Checksum {
            expected: report.weights_checksum.clone(),
            found,
        });
    }
    let again = solve(model, &report.task, &report.config, report.rng_seed)?;
    if let Some(events) = stored_trace {
        if let Some((index, expected, actual)) = first_divergence(events, &again.trace.events) {
            return Err(Error::ReplayDivergence {
                index,
                expected: expected.unwrap_or_else(|| "<end of trace>".into()),
                actual: actual.unwrap_or_else(|| "<end of trace>".into()),
            });
        }
    }
    let a = serde_json::to_value(report).expect("report serializes");
    let b = serde_json::to_value(&again.report).expect("report serializes");
    if a != b || serde_json::to_string(&a).unwrap() != serde_json::to_string(&b).unwrap() {
        let (a_obj, b_obj) = (a.as_object().unwrap(), b.as_object().unwrap());
        let field = a_obj
            .keys()
            .find(|k| a_obj.get(*k) != b_obj.get(*k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::ReplayDivergence {
            index: 0,
            expected: format!("{field}: {}", a_obj.get(&field).map_or("".into(), |v| v.to_string())),
            actual: format!("{field}: {}", b_obj.get(&field).map_or("".into(), |v| v.to_string())),
        });
    }
    Ok(again)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_eight_components_give_rho() {
        let wall = WallClock {
            total_ns: 473_660_000,
            forward_ns: 192_660_000,
            backward_ns: 281_000_000,
            phases: vec![PhaseWall {
                forward_ns: 192_660_000,
                backward_ns: 281_000_000,
            }],
        };
        let est = estimate_budget(&wall).unwrap();
        assert_eq!(est.rho_rounded(), 1.46);
        assert!((est.predicted_ms - 473.66).abs() < 1e-9);
    }

    #[test]
    fn no_backward_means_rho_zero() {
        let wall = WallClock {
            total_ns: 10_000_000,
            forward_ns: 8_000_000,
            backward_ns: 0,
            phases: vec![PhaseWall::default(); 4],
        };
        let est = estimate_budget(&wall).unwrap();
        assert_eq!(est.rho, 0.0);
        assert!((est.predicted_ms - 8.0).abs() < 1e-12);
        assert!(estimate_budget(&WallClock::default()).is_err());
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let a = EvolutionConfig::default();
        let mut b = a;
        b.search.c_puct = 1.0;
        let mut c = a;
        c.grpo.beta = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), EvolutionConfig::default().fingerprint());
    }
}

//! Group-relative policy optimization over sibling thoughts.
//!
//! A group is the set of children produced by one expansion. Advantages are
//! the group-normalized rewards; the loss is the clipped importance-weighted
//! surrogate per generated token, minus two exact KL penalties (against the
//! periodically synced reference adapter and against the adapter as it was
//! initialized for the task).

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    apply_update, backward_adapter, continuation_logits, evaluate_objective, fd_check, AdamConfig,
    AdapterParams, GroupObjective, LossTerms, OptimizerState,
};
use crate::dsl::gen_task;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, BaseWeights, PromptCache, ReasoningState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub fixed_kl: f64,
    pub eta: f64,
    pub adv_clip: f64,
    pub epochs: usize,
    pub ref_sync_every: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            epsilon: 0.3,
            beta: 0.02,
            fixed_kl: 0.005,
            eta: 1e-4,
            adv_clip: 5.0,
            epochs: 3,
            ref_sync_every: 10,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.beta >= 0.0
            && self.fixed_kl >= 0.0
            && self.eta > 0.0
            && self.adv_clip > 0.0
            && self.epochs >= 1
            && self.ref_sync_every >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid GRPO config {self:?}")))
        }
    }
}

/// `clip((r − mean) / max(σ, η), −C, C)` with the population σ.
pub fn compute_advantages(rewards: &[f64], config: &GrpoConfig) -> Vec<f64> {
    if rewards.iter().all(|r| *r == rewards[0]) {
        // exact zeros; the mean of equal values can differ from them by an ulp
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(config.eta);
    rewards
        .iter()
        .map(|r| ((r - mean) / denom).clamp(-config.adv_clip, config.adv_clip))
        .collect()
}

/// `Σ p (log p − log q)` over the full vocabulary, from raw logits.
pub fn kl_exact(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    kl_from_log_probs(&log_softmax(p_logits), &log_softmax(q_logits))
}

pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Per-token clipped surrogate `min(rÂ, clip(r)Â)` and its derivative with
/// respect to `log π` (the ratio is `exp(log π − log π_old)`).
pub fn token_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, ratio * advantage)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Generated tokens, EOS included when emitted.
    pub thought: Vec<u32>,
    /// Untempered per-token log-probabilities recorded at generation.
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
}

/// Sibling trajectories sharing one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBuffer {
    pub parent: usize,
    /// Encoded parent state followed by the separator that opens a thought.
    pub prefix: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

impl GroupBuffer {
    pub fn new(parent: usize, prefix: Vec<u32>, trajectories: Vec<Trajectory>) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::Buffer("empty prefix".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            if t.thought.is_empty() {
                return Err(Error::Buffer(format!("trajectory {i} has no tokens")));
            }
            if t.old_logprobs.len() != t.thought.len() {
                return Err(Error::Buffer(format!(
                    "trajectory {i}: {} tokens but {} old log-probs",
                    t.thought.len(),
                    t.old_logprobs.len()
                )));
            }
        }
        Ok(GroupBuffer {
            parent,
            prefix,
            trajectories,
            advantages: Vec::new(),
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn fill_advantages(&mut self, config: &GrpoConfig) {
        self.advantages = compute_advantages(&self.rewards(), config);
    }

    fn thoughts(&self) -> Vec<&[u32]> {
        self.trajectories.iter().map(|t| t.thought.as_slice()).collect()
    }
}

/// Frozen adapter copy serving as π_ref.
#[derive(Debug, Clone, PartialEq)]
pub struct RefSnapshot {
    pub adapter: AdapterParams,
    /// Internalize-call count at which it was taken.
    pub step: u64,
}

/// Token-level statistics gathered while evaluating the loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub tokens: usize,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl_ref: f64,
    pub mean_kl_init: f64,
}

#[derive(Default)]
struct StatAcc {
    tokens: usize,
    ratio_sum: f64,
    ratio_max: f64,
    clipped: usize,
    kl_ref: f64,
    kl_init: f64,
}

impl StatAcc {
    fn finish(&self) -> LossStats {
        let n = self.tokens.max(1) as f64;
        LossStats {
            tokens: self.tokens,
            mean_ratio: self.ratio_sum / n,
            max_ratio: self.ratio_max,
            clip_fraction: self.clipped as f64 / n,
            mean_kl_ref: self.kl_ref / n,
            mean_kl_init: self.kl_init / n,
        }
    }
}

/// A group buffer bound to precomputed reference and initial-adapter
/// log-distributions; implements the loss as a [`GroupObjective`].
pub struct GrpoBatch<'a> {
    buffer: &'a GroupBuffer,
    config: GrpoConfig,
    /// `[trajectory][token][vocab]` log-probabilities.
    ref_lp: Vec<Vec<Vec<f64>>>,
    init_lp: Vec<Vec<Vec<f64>>>,
    stats: RefCell<StatAcc>,
}

fn log_dists(
    model: &BaseWeights,
    buffer: &GroupBuffer,
    adapter: &AdapterParams,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let v = model.cfg.vocab;
    Ok(continuation_logits(model, &buffer.prefix, &buffer.thoughts(), Some(adapter))?
        .into_iter()
        .map(|l| l.chunks(v).map(log_softmax).collect())
        .collect())
}

impl<'a> GrpoBatch<'a> {
    pub fn new(
        model: &BaseWeights,
        buffer: &'a GroupBuffer,
        reference: &AdapterParams,
        init: &AdapterParams,
        config: &GrpoConfig,
    ) -> Result<Self> {
        if buffer.trajectories.is_empty() {
            return Err(Error::Buffer("empty group".into()));
        }
        if buffer.advantages.len() != buffer.trajectories.len() {
            return Err(Error::Buffer(format!(
                "{} advantages for {} trajectories",
                buffer.advantages.len(),
                buffer.trajectories.len()
            )));
        }
        let ref_lp = if config.beta > 0.0 || reference == init {
            log_dists(model, buffer, reference)?
        } else {
            Vec::new()
        };
        let init_lp = if reference == init {
            ref_lp.clone()
        } else if config.fixed_kl > 0.0 {
            log_dists(model, buffer, init)?
        } else {
            Vec::new()
        };
        Ok(GrpoBatch {
            buffer,
            config: *config,
            ref_lp,
            init_lp,
            stats: RefCell::new(StatAcc::default()),
        })
    }

    fn take_stats(&self) -> LossStats {
        std::mem::take(&mut *self.stats.borrow_mut()).finish()
    }
}

impl GroupObjective for GrpoBatch<'_> {
    fn prompt(&self) -> &[u32] {
        &self.buffer.prefix
    }

    fn n_continuations(&self) -> usize {
        self.buffer.trajectories.len()
    }

    fn continuation(&self, i: usize) -> &[u32] {
        &self.buffer.trajectories[i].thought
    }

    fn eval(&self, i: usize, logits: &[f64], want_grad: bool) -> (LossTerms, Option<Vec<f64>>) {
        let traj = &self.buffer.trajectories[i];
        let c = &self.config;
        let adv = self.buffer.advantages[i];
        let n = traj.thought.len();
        let v = logits.len() / n;
        let w = 1.0 / (self.buffer.trajectories.len() as f64 * n as f64);
        let has_ref = !self.ref_lp.is_empty();
        let has_init = !self.init_lp.is_empty();
        let mut terms = LossTerms::default();
        let mut grad = want_grad.then(|| vec![0.0; logits.len()]);
        let mut st = self.stats.borrow_mut();
        for j in 0..n {
            let lp = log_softmax(&logits[j * v..(j + 1) * v]);
            let y = traj.thought[j] as usize;
            let ratio = (lp[y] - traj.old_logprobs[j]).exp();
            let (surr, dsurr) = token_surrogate(ratio, adv, c.epsilon);
            let kl_ref = if has_ref { kl_from_log_probs(&lp, &self.ref_lp[i][j]) } else { 0.0 };
            let kl_init = if has_init { kl_from_log_probs(&lp, &self.init_lp[i][j]) } else { 0.0 };
            terms.policy_term -= w * surr;
            terms.kl_ref_term += w * c.beta * kl_ref;
            terms.kl_init_term += w * c.fixed_kl * kl_init;
            st.tokens += 1;
            st.ratio_sum += ratio;
            st.ratio_max = st.ratio_max.max(ratio);
            if (ratio - 1.0).abs() > c.epsilon {
                st.clipped += 1;
            }
            st.kl_ref += kl_ref;
            st.kl_init += kl_init;
            if let Some(g) = grad.as_mut() {
                let row = &mut g[j * v..(j + 1) * v];
                for k in 0..v {
                    let p = lp[k].exp();
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    let mut d = -dsurr * (onehot - p);
                    if has_ref {
                        d += c.beta * p * (lp[k] - self.ref_lp[i][j][k] - kl_ref);
                    }
                    if has_init {
                        d += c.fixed_kl * p * (lp[k] - self.init_lp[i][j][k] - kl_init);
                    }
                    row[k] = w * d;
                }
            }
        }
        terms.loss = terms.policy_term + terms.kl_ref_term + terms.kl_init_term;
        (terms, grad)
    }
}

/// Loss value and token statistics of `buffer` under `adapter`.
pub fn grpo_loss(
    model: &BaseWeights,
    buffer: &GroupBuffer,
    adapter: &AdapterParams,
    reference: &AdapterParams,
    init: &AdapterParams,
    config: &GrpoConfig,
) -> Result<(LossTerms, LossStats)> {
    let batch = GrpoBatch::new(model, buffer, reference, init, config)?;
    let terms = evaluate_objective(model, &batch, Some(adapter))?;
    Ok((terms, batch.take_stats()))
}

/// Everything that lives for one task's adaptation.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub adapter: AdapterParams,
    pub opt: OptimizerState,
    pub reference: RefSnapshot,
    /// The adapter as initialized for this task (φ₁).
    pub init: AdapterParams,
    pub internalize_calls: u64,
}

impl AdaptationState {
    pub fn new(adapter: AdapterParams, adam: AdamConfig) -> Self {
        AdaptationState {
            opt: OptimizerState::new(adam, &adapter),
            reference: RefSnapshot {
                adapter: adapter.clone(),
                step: 0,
            },
            init: adapter.clone(),
            adapter,
            internalize_calls: 0,
        }
    }

    pub fn discard(self) {
        crate::adapter::discard(self.adapter, self.opt);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub terms: LossTerms,
    pub stats: LossStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub advantages: Vec<f64>,
    /// Loss evaluated at the parameters each epoch started from.
    pub epochs: Vec<EpochRecord>,
    /// Statistics of the updated adapter against the same batch.
    pub post: LossStats,
    pub post_loss: f64,
    pub ref_synced: bool,
}

/// E epochs of loss → gradient → Adam step on one group; old log-probs stay
/// at their generation-time values throughout. Every `ref_sync_every`-th
/// call ends by re-snapshotting π_ref.
pub fn internalize(
    model: &BaseWeights,
    buffer: &mut GroupBuffer,
    state: &mut AdaptationState,
    config: &GrpoConfig,
) -> Result<UpdateDiagnostics> {
    config.validate()?;
    if buffer.trajectories.is_empty() {
        return Err(Error::Buffer("empty group".into()));
    }
    if buffer.trajectories.iter().any(|t| t.reward >= 1.0) {
        return Err(Error::Buffer("a solved group is never internalized".into()));
    }
    buffer.fill_advantages(config);
    let buffer: &GroupBuffer = buffer;
    let batch = GrpoBatch::new(model, buffer, &state.reference.adapter, &state.init, config)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let grads = backward_adapter(model, &batch, &state.adapter)?;
        epochs.push(EpochRecord {
            terms: grads.terms.clone(),
            stats: batch.take_stats(),
        });
        apply_update(&mut state.adapter, &grads, &mut state.opt)?;
    }
    let post_terms = evaluate_objective(model, &batch, Some(&state.adapter))?;
    let post = batch.take_stats();
    state.internalize_calls += 1;
    let ref_synced = state.internalize_calls % config.ref_sync_every == 0;
    if ref_synced {
        state.reference = RefSnapshot {
            adapter: state.adapter.clone(),
            step: state.internalize_calls,
        };
    }
    Ok(UpdateDiagnostics {
        advantages: buffer.advantages.clone(),
        epochs,
        post,
        post_loss: post_terms.loss,
        ref_synced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub groups: usize,
    pub coords_per_group: usize,
    pub group_size: usize,
    pub step: f64,
    pub beta: f64,
    pub fixed_kl: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            groups: 10,
            coords_per_group: 10,
            group_size: 3,
            step: 1e-4,
            beta: 0.3,
            fixed_kl: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords: usize,
    pub per_group: Vec<f64>,
    pub worst: f64,
}

/// Fresh adapter with `B` drawn uniformly from `[-b_scale, b_scale]`, so the
/// low-rank path is live.
pub fn perturbed_adapter(model: &BaseWeights, seed: u64, b_scale: f64) -> AdapterParams {
    let mut a = AdapterParams::init(&model.cfg, 8, 16.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    for blk in a.blocks.iter_mut() {
        for pair in [&mut blk.q, &mut blk.v] {
            for b in pair.b.iter_mut() {
                *b = b_scale * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
    }
    a
}

/// Central-difference check of the full loss gradient on random groups.
/// Sampling, current, reference and anchor adapters are all distinct, so
/// ratios and both divergence terms are non-trivial.
pub fn grad_check(model: &BaseWeights, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let grpo = GrpoConfig {
        beta: config.beta,
        fixed_kl: config.fixed_kl,
        ..Default::default()
    };
    grpo.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut per_group = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let base = config.seed.wrapping_mul(1_000).wrapping_add(10 * g as u64);
        let gen = perturbed_adapter(model, base + 1, 0.05);
        let task = gen_task(base, 1 + (g % 4) as u8)?;
        let cache = PromptCache::for_state(model, Some(&gen), &ReasoningState::new(task), 12)?;
        let trajectories = (0..config.group_size)
            .map(|_| {
                let th = cache.sample(1.0, 12, &mut rng)?;
                Ok(Trajectory {
                    thought: th.tokens,
                    old_logprobs: th.gen_logprobs,
                    reward: rng.gen_range(0..5) as f64 / 5.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut buf = GroupBuffer::new(0, cache.prompt.clone(), trajectories)?;
        buf.fill_advantages(&grpo);
        let current = perturbed_adapter(model, base + 2, 0.05);
        let reference = perturbed_adapter(model, base + 3, 0.05);
        let init = perturbed_adapter(model, base + 4, 0.05);
        let batch = GrpoBatch::new(model, &buf, &reference, &init, &grpo)?;
        let grads = backward_adapter(model, &batch, &current)?;
        let loss = |a: &AdapterParams| Ok(evaluate_objective(model, &batch, Some(a))?.loss);
        per_group.push(fd_check(loss, &grads, &current, config.step, config.coords_per_group, &mut rng)?);
    }
    Ok(GradCheckReport {
        coords: config.groups * config.coords_per_group,
        worst: per_group.iter().cloned().fold(0.0, f64::max),
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn advantages_match_scalar_oracle() {
        let cfg = GrpoConfig::default();
        let a = compute_advantages(&[1.0, 0.0, 0.5], &cfg);
        let sd = (1.0f64 / 6.0).sqrt();
        assert!((a[0] - 0.5 / sd).abs() < 1e-12);
        assert!((a[0] - 1.224_744_871).abs() < 1e-8);
        assert!((a[1] + 0.5 / sd).abs() < 1e-12);
        assert_eq!(a[2], 0.0);
        assert_eq!(compute_advantages(&[0.6, 0.6, 0.6], &cfg), vec![0.0; 3]);
    }

    #[test]
    fn outlier_advantage_is_clipped() {
        let cfg = GrpoConfig::default();
        let mut r = vec![0.0; 26];
        r[0] = 1.0;
        // unclipped: (1 − 1/26) / sqrt(25)/26 = 25/5 = 5 plus rounding above 5
        let mean: f64 = 1.0 / 26.0;
        let sd = ((1.0 - mean).powi(2) / 26.0 + 25.0 * mean * mean / 26.0).sqrt();
        assert!((1.0 - mean) / sd >= 5.0 - 1e-12);
        let a = compute_advantages(&r, &cfg);
        assert!(a[0] <= 5.0);
        assert!((a[0] - 5.0).abs() < 1e-12);
        let tight = GrpoConfig { adv_clip: 2.0, ..cfg };
        assert_eq!(compute_advantages(&r, &tight)[0], 2.0);
    }

    #[test]
    fn kl_oracle_values() {
        let p = [0.9f64.ln(), 0.1f64.ln()];
        let q = [0.5f64.ln(), 0.5f64.ln()];
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_exact(&p, &q) - want).abs() < 1e-12);
        assert!((kl_exact(&p, &q) - 0.368064).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert!(kl_exact(&a, &b) >= -1e-12);
            assert!(kl_exact(&a, &a).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_min_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let r: f64 = rng.gen_range(0.0..3.0);
            let a: f64 = rng.gen_range(-5.0..5.0);
            let (s, _) = token_surrogate(r, a, 0.3);
            // pessimistic bound, for either sign of the advantage
            assert!(s <= r * a);
            assert!(s <= r.clamp(0.7, 1.3) * a);
        }
        // ratio beyond 1 + ε with positive advantage: clipped, no gradient
        let (s, g) = token_surrogate(1.6, 1.0, 0.3);
        assert!((s - 1.3).abs() < 1e-15);
        assert_eq!(g, 0.0);
        // inside the trust region the gradient is r·Â
        assert_eq!(token_surrogate(1.1, 2.0, 0.3).1, 2.2);
    }

    #[test]
    fn buffer_validation() {
        let t = Trajectory {
            thought: vec![20, 11, 1],
            old_logprobs: vec![-1.0],
            reward: 0.0,
        };
        assert!(GroupBuffer::new(0, vec![0, 2], vec![t]).is_err());
    }
}

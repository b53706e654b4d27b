//! Transient low-rank adapters: initialization, adapter-only reverse mode
//! over a group of continuations sharing one prompt, Adam updates, and a
//! finite-difference probe.

use std::cell::Cell;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{BaseWeights, GradSink, KvCache, KvGrad, ModelConfig};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const INIT_STD: f64 = 0.02;

thread_local! {
    static LIVE_ADAPTER_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Bytes held by adapter parameter tensors alive on this thread.
pub fn live_adapter_bytes() -> usize {
    LIVE_ADAPTER_BYTES.with(|c| c.get())
}

/// `A` is `rank × d_in`, `B` is `d_out × rank`.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawLora")]
pub struct LoraPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LoraPair {
    fn zeros(rank: usize, d_in: usize, d_out: usize) -> Self {
        Self::tracked(vec![0.0; rank * d_in], vec![0.0; d_out * rank])
    }

    fn tracked(a: Vec<f64>, b: Vec<f64>) -> Self {
        let bytes = (a.len() + b.len()) * std::mem::size_of::<f64>();
        LIVE_ADAPTER_BYTES.with(|c| c.set(c.get() + bytes));
        LoraPair { a, b }
    }
}

#[derive(Deserialize)]
struct RawLora {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl From<RawLora> for LoraPair {
    fn from(r: RawLora) -> Self {
        LoraPair::tracked(r.a, r.b)
    }
}

impl Clone for LoraPair {
    fn clone(&self) -> Self {
        Self::tracked(self.a.clone(), self.b.clone())
    }
}

impl Drop for LoraPair {
    fn drop(&mut self) {
        let bytes = (self.a.len() + self.b.len()) * std::mem::size_of::<f64>();
        LIVE_ADAPTER_BYTES.with(|c| c.set(c.get().saturating_sub(bytes)));
    }
}

/// Adapted matrices of one block: the query and value projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAdapter {
    pub q: LoraPair,
    pub v: LoraPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub rank: usize,
    pub alpha: f64,
    pub blocks: Vec<BlockAdapter>,
    pub step_counter: u64,
}

impl AdapterParams {
    pub fn zeros(cfg: &ModelConfig, rank: usize, alpha: f64) -> Self {
        let d = cfg.d_model;
        AdapterParams {
            rank,
            alpha,
            blocks: (0..cfg.n_layers)
                .map(|_| BlockAdapter {
                    q: LoraPair::zeros(rank, d, d),
                    v: LoraPair::zeros(rank, d, d),
                })
                .collect(),
            step_counter: 0,
        }
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`: the adapter starts as an exact no-op.
    pub fn init(cfg: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Self {
        let mut p = Self::zeros(cfg, rank, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        for b in &mut p.blocks {
            for pair in [&mut b.q, &mut b.v] {
                for x in pair.a.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        p
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Zero tensors with this adapter's layout.
    pub fn zeros_like(&self) -> Vec<BlockAdapter> {
        self.blocks
            .iter()
            .map(|b| BlockAdapter {
                q: LoraPair::tracked(vec![0.0; b.q.a.len()], vec![0.0; b.q.b.len()]),
                v: LoraPair::tracked(vec![0.0; b.v.a.len()], vec![0.0; b.v.b.len()]),
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        tensors(&self.blocks).map(|t| t.len()).sum()
    }

    pub fn get(&self, idx: usize) -> f64 {
        let (t, i) = locate(&self.blocks, idx);
        tensors(&self.blocks).nth(t).unwrap()[i]
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        let (t, i) = locate(&self.blocks, idx);
        tensors_mut(&mut self.blocks).nth(t).unwrap()[i] = value;
    }

    pub fn b_is_zero(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.q.b.iter().chain(&b.v.b).all(|v| *v == 0.0))
    }
}

fn tensors(blocks: &[BlockAdapter]) -> impl Iterator<Item = &Vec<f64>> {
    blocks
        .iter()
        .flat_map(|b| [&b.q.a, &b.q.b, &b.v.a, &b.v.b])
}

fn tensors_mut(blocks: &mut [BlockAdapter]) -> impl Iterator<Item = &mut Vec<f64>> {
    blocks
        .iter_mut()
        .flat_map(|b| [&mut b.q.a, &mut b.q.b, &mut b.v.a, &mut b.v.b])
}

fn locate(blocks: &[BlockAdapter], mut idx: usize) -> (usize, usize) {
    for (t, v) in tensors(blocks).enumerate() {
        if idx < v.len() {
            return (t, idx);
        }
        idx -= v.len();
    }
    panic!("adapter coordinate out of range");
}

/// Flat copy of adapter tensors in canonical order.
pub fn flatten(blocks: &[BlockAdapter]) -> Vec<f64> {
    tensors(blocks).flat_map(|t| t.iter().copied()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub policy_term: f64,
    pub kl_ref_term: f64,
    pub kl_init_term: f64,
}

#[derive(Debug, Clone)]
pub struct GradBundle {
    pub grads: Vec<BlockAdapter>,
    pub terms: LossTerms,
}

impl GradBundle {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.grads)
    }

    pub fn is_zero(&self) -> bool {
        tensors(&self.grads).all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// A loss over continuations of a single shared prompt, expressed through the
/// logits that predict each continuation token.
pub trait GroupObjective {
    /// Shared prompt (at least one token).
    fn prompt(&self) -> &[u32];
    fn n_continuations(&self) -> usize;
    fn continuation(&self, i: usize) -> &[u32];
    /// Loss contribution of continuation `i` given its predicting logits
    /// (`len × vocab`, row j predicts token j). Returns the terms and, when
    /// `want_grad` is set, the gradient with respect to those logits.
    fn eval(&self, i: usize, logits: &[f64], want_grad: bool) -> (LossTerms, Option<Vec<f64>>);
}

/// Forward pass shared by loss evaluation and the backward pass. The prompt
/// minus its last token is run once; each continuation segment starts with
/// that last prompt token so its first row predicts the first continuation
/// token.
struct GroupForward {
    prefix_cache: KvCache,
    prefix_trace: Option<crate::policy::SegmentTrace>,
}

fn group_prefix(
    model: &BaseWeights,
    prompt: &[u32],
    adapter: Option<&AdapterParams>,
    keep_trace: bool,
) -> Result<GroupForward> {
    if prompt.is_empty() {
        return Err(Error::Buffer("empty prompt".into()));
    }
    let mut cache = KvCache::new(&model.cfg);
    let (_, trace) = model.forward_segment(adapter, &mut cache, &prompt[..prompt.len() - 1], keep_trace)?;
    Ok(GroupForward {
        prefix_cache: cache,
        prefix_trace: trace,
    })
}

fn continuation_tokens(prompt: &[u32], cont: &[u32]) -> Vec<u32> {
    let mut seg = Vec::with_capacity(cont.len());
    seg.push(*prompt.last().unwrap());
    seg.extend_from_slice(&cont[..cont.len().saturating_sub(1)]);
    seg
}

fn add_terms(acc: &mut LossTerms, t: &LossTerms) {
    acc.loss += t.loss;
    acc.policy_term += t.policy_term;
    acc.kl_ref_term += t.kl_ref_term;
    acc.kl_init_term += t.kl_init_term;
}

/// Logits predicting each token of each continuation of `prompt`
/// (`len × vocab` per continuation), with the prompt run once.
pub fn continuation_logits(
    model: &BaseWeights,
    prompt: &[u32],
    continuations: &[&[u32]],
    adapter: Option<&AdapterParams>,
) -> Result<Vec<Vec<f64>>> {
    let fwd = group_prefix(model, prompt, adapter, false)?;
    continuations
        .iter()
        .map(|cont| {
            if cont.is_empty() {
                return Ok(Vec::new());
            }
            let mut cache = fwd.prefix_cache.clone();
            Ok(model
                .forward_segment(adapter, &mut cache, &continuation_tokens(prompt, cont), false)?
                .0)
        })
        .collect()
}

/// Objective value without gradients.
pub fn evaluate_objective(
    model: &BaseWeights,
    obj: &impl GroupObjective,
    adapter: Option<&AdapterParams>,
) -> Result<LossTerms> {
    let conts: Vec<&[u32]> = (0..obj.n_continuations()).map(|i| obj.continuation(i)).collect();
    let logits = continuation_logits(model, obj.prompt(), &conts, adapter)?;
    let mut total = LossTerms::default();
    for (i, l) in logits.iter().enumerate() {
        if !l.is_empty() {
            add_terms(&mut total, &obj.eval(i, l, false).0);
        }
    }
    Ok(total)
}

/// Exact gradient of `obj` with respect to the adapter's `A` and `B` only.
/// The base network is traversed but never receives a gradient.
pub fn backward_adapter(
    model: &BaseWeights,
    obj: &impl GroupObjective,
    adapter: &AdapterParams,
) -> Result<GradBundle> {
    let fwd = group_prefix(model, obj.prompt(), Some(adapter), true)?;
    let prefix_len = fwd.prefix_cache.len;
    let mut grads = adapter.zeros_like();
    let mut prefix_grad = KvGrad::zeros(&model.cfg, prefix_len);
    let mut total = LossTerms::default();

    for i in 0..obj.n_continuations() {
        if obj.continuation(i).is_empty() {
            continue;
        }
        let mut cache = fwd.prefix_cache.clone();
        let seg = continuation_tokens(obj.prompt(), obj.continuation(i));
        let (logits, trace) = model.forward_segment(Some(adapter), &mut cache, &seg, true)?;
        let (terms, dlogits) = obj.eval(i, &logits, true);
        let dlogits = dlogits.expect("gradient requested");
        if let Some(bad) = dlogits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("d(loss)/d(logits) of continuation {i}, flat index {bad}"),
            });
        }
        add_terms(&mut total, &terms);
        let mut kvg = KvGrad::zeros(&model.cfg, cache.len);
        model.backward_segment(
            Some(adapter),
            &cache,
            &trace.unwrap(),
            Some(&dlogits),
            &mut kvg,
            &mut GradSink {
                base: None,
                adapter: Some(&mut grads),
            },
        );
        prefix_grad.accumulate_prefix(&kvg);
    }
    if let Some(trace) = &fwd.prefix_trace {
        if !trace.tokens.is_empty() {
            model.backward_segment(
                Some(adapter),
                &fwd.prefix_cache,
                trace,
                None,
                &mut prefix_grad,
                &mut GradSink {
                    base: None,
                    adapter: Some(&mut grads),
                },
            );
        }
    }
    for (ti, t) in tensors(&grads).enumerate() {
        if let Some(j) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("adapter gradient tensor {ti} (block {}, {}), index {j}", ti / 4, ["q.A", "q.B", "v.A", "v.B"][ti % 4]),
            });
        }
    }
    Ok(GradBundle { grads, terms: total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, adapter: &AdapterParams) -> Self {
        let n = adapter.n_params();
        OptimizerState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step descending the loss.
pub fn apply_update(
    adapter: &mut AdapterParams,
    grads: &GradBundle,
    opt: &mut OptimizerState,
) -> Result<()> {
    let shapes_match = adapter.blocks.len() == grads.grads.len()
        && tensors(&adapter.blocks)
            .zip(tensors(&grads.grads))
            .all(|(a, g)| a.len() == g.len())
        && opt.m.len() == adapter.n_params();
    if !shapes_match {
        return Err(Error::Shape("gradient/optimizer layout differs from adapter".into()));
    }
    opt.step += 1;
    let c = opt.config;
    let bc1 = 1.0 - c.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.step as i32);
    let mut k = 0;
    for (p, g) in tensors_mut(&mut adapter.blocks).zip(tensors(&grads.grads)) {
        for (pi, gi) in p.iter_mut().zip(g) {
            opt.m[k] = c.beta1 * opt.m[k] + (1.0 - c.beta1) * gi;
            opt.v[k] = c.beta2 * opt.v[k] + (1.0 - c.beta2) * gi * gi;
            let mhat = opt.m[k] / bc1;
            let vhat = opt.v[k] / bc2;
            *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            k += 1;
        }
    }
    adapter.step_counter += 1;
    Ok(())
}

/// Ends an adapter's life. Taking both by value makes reuse impossible.
pub fn discard(adapter: AdapterParams, opt: OptimizerState) {
    drop(adapter);
    drop(opt);
}

/// Central-difference probe of `n_coords` random adapter coordinates against
/// an analytic gradient; returns the worst relative error.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)` with a small absolute
/// floor so coordinates with vanishing gradient are not judged on round-off.
pub fn fd_check(
    loss: impl Fn(&AdapterParams) -> Result<f64>,
    analytic: &GradBundle,
    adapter: &AdapterParams,
    step: f64,
    n_coords: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let flat = analytic.flat();
    let n = adapter.n_params();
    let mut worst: f64 = 0.0;
    let mut probe = adapter.clone();
    for _ in 0..n_coords {
        let idx = rng.gen_range(0..n);
        let x0 = adapter.get(idx);
        probe.set(idx, x0 + step);
        let fp = loss(&probe)?;
        probe.set(idx, x0 - step);
        let fm = loss(&probe)?;
        probe.set(idx, x0);
        let numeric = (fp - fm) / (2.0 * step);
        let a = flat[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub const FD_FLOOR: f64 = 1e-6;

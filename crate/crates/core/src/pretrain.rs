//! Builds the frozen base policy: a corpus of (task, gold program) examples
//! and full-parameter next-token training on the program tokens.
//!
//! Targets are canonicalized: when a shorter (or equally short) loop-free
//! program passes the same tests, the first one in a fixed enumeration order
//! replaces the generator's program.
//!
//! Some examples carry a history of unrelated attempts with their true
//! feedback on the task. The target is always the gold program, so the base
//! learns to tolerate long contexts without learning to exploit feedback.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdamConfig;
use crate::dsl::{evaluate, gen_task, shortest_equivalent, Program, TaskInstance};
use crate::error::{Error, Result};
use crate::policy::vocab::{encode_program, EOS, SEP};
use crate::policy::{
    encode_state_within, log_softmax, BaseWeights, Feedback, GradSink, KvCache, KvGrad,
    ModelConfig, ReasoningState, Thought, MAX_CONTEXT,
};

/// Training tasks are drawn from seeds at or above this value; evaluation
/// suites use seeds below it.
pub const TRAIN_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub tokens: Vec<u32>,
    /// 1 where the token is a training target (program tokens and EOS).
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    /// (difficulty, weight) pairs.
    pub difficulty_mix: Vec<(u8, f64)>,
    /// Probability that an example carries a distractor history.
    pub history_prob: f64,
    pub max_history: usize,
    /// Replace each generator program with its shortest straight-line
    /// equivalent of at most this many instructions (0 keeps the original).
    pub canonical_max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 1000,
            difficulty_mix: vec![(1, 0.35), (2, 0.3), (3, 0.2), (4, 0.15)],
            history_prob: 0.3,
            max_history: 16,
            canonical_max_len: 4,
            seed: 1,
        }
    }
}

pub fn sample_difficulty(mix: &[(u8, f64)], rng: &mut impl Rng) -> u8 {
    let total: f64 = mix.iter().map(|m| m.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for (d, w) in mix {
        if u < *w {
            return *d;
        }
        u -= w;
    }
    mix.last().map(|m| m.0).unwrap_or(1)
}

fn corpus_example(task: &TaskInstance, history: &[Program], gold: &Program) -> Result<CorpusExample> {
    let mut state = ReasoningState::new(task.clone());
    for p in history {
        let mut toks = encode_program(p);
        toks.push(EOS);
        let th = Thought {
            text: p.render(),
            gen_logprobs: vec![0.0; toks.len()],
            tokens: toks,
        };
        let fb = Feedback::from_report(&evaluate(p, task));
        state.push(&th, fb);
    }
    let mut target = encode_program(gold);
    target.push(EOS);
    let mut tokens = encode_state_within(&state, MAX_CONTEXT - 1 - target.len())?;
    tokens.push(SEP);
    let n_ctx = tokens.len();
    tokens.extend_from_slice(&target);
    let mut mask = vec![0u8; n_ctx];
    mask.extend(std::iter::repeat(1).take(target.len()));
    Ok(CorpusExample { tokens, mask })
}

/// Samples `config.n` distinct examples, deterministically per seed.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Vec<CorpusExample>> {
    if config.n == 0 {
        return Err(Error::Config("corpus size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.n);
    let mut task_seed = TRAIN_SEED_OFFSET + config.seed.wrapping_mul(1_000_003) % (1 << 40);
    while out.len() < config.n {
        task_seed += 1;
        let difficulty = sample_difficulty(&config.difficulty_mix, &mut rng);
        let task = gen_task(task_seed, difficulty)?;
        let mut gold = task.hidden_solution.clone().expect("generated task has a solution");
        if config.canonical_max_len > 0 {
            if let Some(p) = shortest_equivalent(&task, config.canonical_max_len.min(gold.len())) {
                gold = p;
            }
        }
        if !seen.insert((task.tests.clone(), gold.clone())) {
            continue;
        }
        let mut history = Vec::new();
        if rng.gen_bool(config.history_prob) {
            let h = rng.gen_range(1..=config.max_history);
            while history.len() < h {
                let d = rng.gen_range(1..=4);
                let other = gen_task(TRAIN_SEED_OFFSET / 2 + rng.gen_range(0..1u64 << 30), d)?;
                let p = other.hidden_solution.unwrap();
                if evaluate(&p, &task).reward < 1.0 {
                    history.push(p);
                }
            }
        }
        out.push(corpus_example(&task, &history, &gold)?);
    }
    Ok(out)
}

pub fn write_corpus(corpus: &[CorpusExample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for ex in corpus {
        serde_json::to_writer(&mut buf, ex).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

/// Cross-entropy of `targets` under row-major `logits`, summed over positions
/// with `mask == 1`. Returns (loss, counted positions, dloss/dlogits·scale).
pub fn masked_cross_entropy(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[u8],
    scale: f64,
) -> (f64, usize, Vec<f64>) {
    let mut loss = 0.0;
    let mut count = 0;
    let mut dl = vec![0.0; logits.len()];
    for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0 {
            continue;
        }
        let ls = log_softmax(&logits[p * vocab..(p + 1) * vocab]);
        loss -= ls[t as usize];
        count += 1;
        for (j, l) in ls.iter().enumerate() {
            dl[p * vocab + j] = scale * (l.exp() - if j == t as usize { 1.0 } else { 0.0 });
        }
    }
    (loss, count, dl)
}

/// Masked next-token loss of one example, optionally accumulating its
/// gradient (times `grad_scale`) into `grads`.
pub fn example_loss(
    model: &BaseWeights,
    ex: &CorpusExample,
    grads: Option<(&mut BaseWeights, f64)>,
) -> Result<(f64, usize)> {
    if ex.tokens.len() != ex.mask.len() || ex.tokens.len() < 2 {
        return Err(Error::Shape("corpus example tokens/mask mismatch".into()));
    }
    let inputs = &ex.tokens[..ex.tokens.len() - 1];
    let mut cache = KvCache::new(&model.cfg);
    let (logits, trace) = model.forward_segment(None, &mut cache, inputs, grads.is_some())?;
    let scale = grads.as_ref().map_or(1.0, |g| g.1);
    let (loss, count, dl) =
        masked_cross_entropy(&logits, model.cfg.vocab, &ex.tokens[1..], &ex.mask[1..], scale);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            location: format!("pretraining loss ({} tokens)", ex.tokens.len()),
        });
    }
    if let (Some((g, _)), Some(tr)) = (grads, trace) {
        let mut kvg = KvGrad::zeros(&model.cfg, inputs.len());
        model.backward_segment(
            None,
            &cache,
            &tr,
            Some(&dl),
            &mut kvg,
            &mut GradSink {
                base: Some(g),
                adapter: None,
            },
        );
    }
    Ok((loss, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

/// Full-parameter Adam training on masked cross-entropy with linear warmup and
/// cosine decay. `log` receives every step's mean token loss.
pub fn pretrain(
    corpus: &[CorpusExample],
    config: &PretrainConfig,
    mut log: impl FnMut(&CurvePoint),
) -> Result<(BaseWeights, Vec<CurvePoint>)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BaseWeights::init(ModelConfig::default(), &mut rng);
    let n_params = model.param_count();
    let adam = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    let mut m = vec![0.0; n_params];
    let mut vv = vec![0.0; n_params];
    let steps_per_epoch = corpus.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let n_tokens: usize = batch
                .iter()
                .map(|&i| corpus[i].mask.iter().filter(|m| **m == 1).count())
                .sum();
            let scale = 1.0 / n_tokens.max(1) as f64;
            let mut grads = BaseWeights::zeros(model.cfg);
            let mut loss = 0.0;
            for &i in batch {
                loss += example_loss(&model, &corpus[i], Some((&mut grads, scale)))?.0;
            }
            loss *= scale;
            step += 1;
            let lr = schedule(config, adam.lr, step, total_steps);
            let bc1 = 1.0 - adam.beta1.powi(step as i32);
            let bc2 = 1.0 - adam.beta2.powi(step as i32);
            let mut k = 0;
            for (p, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pi, gi) in p.iter_mut().zip(g.2.iter()) {
                    m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * gi;
                    vv[k] = adam.beta2 * vv[k] + (1.0 - adam.beta2) * gi * gi;
                    *pi -= lr * ((m[k] / bc1) / ((vv[k] / bc2).sqrt() + adam.eps) + config.weight_decay * *pi);
                    k += 1;
                }
            }
            if !model.all_finite() {
                return Err(Error::NonFinite {
                    location: format!("weights after step {step}"),
                });
            }
            let point = CurvePoint { step, loss };
            log(&point);
            curve.push(point);
        }
    }
    model.round_to_f32();
    Ok((model, curve))
}

fn schedule(config: &PretrainConfig, base: f64, step: usize, total: usize) -> f64 {
    if step <= config.warmup_steps {
        return base * step as f64 / config.warmup_steps.max(1) as f64;
    }
    let progress = (step - config.warmup_steps) as f64 / (total - config.warmup_steps).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let cfg = CorpusConfig {
            n: 40,
            ..Default::default()
        };
        let a = gen_corpus(&cfg).unwrap();
        let b = gen_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        for ex in &a {
            assert_eq!(ex.tokens.len(), ex.mask.len());
            assert!(ex.tokens.len() <= MAX_CONTEXT);
            assert_eq!(*ex.tokens.last().unwrap(), EOS);
            // mask covers a contiguous suffix right after a SEP
            let first = ex.mask.iter().position(|m| *m == 1).unwrap();
            assert_eq!(ex.tokens[first - 1], SEP);
            assert!(ex.mask[first..].iter().all(|m| *m == 1));
        }
    }

    #[test]
    fn loss_matches_direct_forward() {
        let cfg = CorpusConfig { n: 3, history_prob: 0.0, ..Default::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = BaseWeights::init(ModelConfig::default(), &mut rng);
        let ex = &corpus[0];
        let v = model.cfg.vocab;
        let logits = model.forward(&ex.tokens[..ex.tokens.len() - 1], None).unwrap();
        let mut want = 0.0;
        for p in 1..ex.tokens.len() {
            if ex.mask[p] == 1 {
                want -= log_softmax(&logits[(p - 1) * v..p * v])[ex.tokens[p] as usize];
            }
        }
        let mut g = BaseWeights::zeros(model.cfg);
        let (loss, count) = example_loss(&model, ex, Some((&mut g, 1.0))).unwrap();
        assert_eq!(count, ex.mask.iter().filter(|m| **m == 1).count());
        assert!((loss - want).abs() < 1e-12);
        assert!(g.tensors().iter().any(|t| t.2.iter().any(|x| *x != 0.0)));
    }

    #[test]
    fn perturbing_masked_targets_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = 30;
        let logits: Vec<f64> = (0..6 * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = vec![4, 7, 1, 20, 21, 1];
        let mask = vec![0, 0, 1, 1, 0, 1];
        let (l1, c1, g1) = masked_cross_entropy(&logits, v, &targets, &mask, 0.5);
        let mut t2 = targets.clone();
        t2[0] = 29;
        t2[1] = 3;
        t2[4] = 0;
        let (l2, c2, g2) = masked_cross_entropy(&logits, v, &t2, &mask, 0.5);
        assert_eq!((l1, c1), (l2, c2));
        assert_eq!(g1, g2);
        for p in [0, 1, 4] {
            assert!(g1[p * v..(p + 1) * v].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn difficulty_mix_proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let ones = (0..n).filter(|_| sample_difficulty(&[(1, 0.5), (2, 0.5)], &mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.03);
    }
}

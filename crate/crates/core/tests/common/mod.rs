#![allow(dead_code)]

use evolve::adapter::AdapterParams;
use evolve::dsl::gen_task;
use evolve::grpo::{GroupBuffer, Trajectory};
use evolve::policy::{BaseWeights, ModelConfig, PromptCache, ReasoningState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random network with every parameter perturbed away from its init.
pub fn random_model(seed: u64) -> BaseWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BaseWeights::init(ModelConfig::default(), &mut rng);
    for t in w.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.05 * (rng.gen::<f64>() - 0.5);
        }
    }
    w.round_to_f32();
    w
}

/// Fresh adapter whose `B` is filled with `N(0, b_std²)`-like noise.
pub fn random_adapter(model: &BaseWeights, seed: u64, b_std: f64) -> AdapterParams {
    let mut a = AdapterParams::init(&model.cfg, 8, 16.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    for blk in a.blocks.iter_mut() {
        for pair in [&mut blk.q, &mut blk.v] {
            for b in pair.b.iter_mut() {
                *b = b_std * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
    }
    a
}

/// `g` short thoughts sampled under `adapter` with arbitrary rewards.
pub fn sampled_group(
    model: &BaseWeights,
    adapter: Option<&AdapterParams>,
    task_seed: u64,
    g: usize,
    rng: &mut ChaCha8Rng,
) -> GroupBuffer {
    let task = gen_task(task_seed, 1 + (task_seed % 4) as u8).unwrap();
    let cache = PromptCache::for_state(model, adapter, &ReasoningState::new(task), 12).unwrap();
    let trajectories = (0..g)
        .map(|_| {
            let th = cache.sample(1.0, 12, rng).unwrap();
            Trajectory {
                thought: th.tokens,
                old_logprobs: th.gen_logprobs,
                reward: rng.gen_range(0..5) as f64 / 5.0,
            }
        })
        .collect();
    GroupBuffer::new(0, cache.prompt.clone(), trajectories).unwrap()
}

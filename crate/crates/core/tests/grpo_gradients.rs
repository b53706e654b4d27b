mod common;

use common::{random_adapter, random_model, sampled_group};
use evolve::adapter::{
    backward_adapter, evaluate_objective, fd_check, AdamConfig, AdapterParams, OptimizerState,
};
use evolve::grpo::{grpo_loss, internalize, AdaptationState, GroupBuffer, GrpoBatch, GrpoConfig};
use evolve::policy::rescore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_at(model: &evolve::policy::BaseWeights, batch: &GrpoBatch, a: &AdapterParams) -> evolve::Result<f64> {
    Ok(evaluate_objective(model, batch, Some(a))?.loss)
}

/// A group whose old log-probs come from a different adapter than the one
/// being differentiated, so ratios and both KL terms are all non-trivial.
fn setup(seed: u64) -> (evolve::policy::BaseWeights, GroupBuffer, AdapterParams, AdapterParams, AdapterParams) {
    let model = random_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = random_adapter(&model, seed + 1, 0.05);
    let mut buf = sampled_group(&model, Some(&gen), seed, 3, &mut rng);
    buf.fill_advantages(&GrpoConfig::default());
    let current = random_adapter(&model, seed + 2, 0.05);
    let reference = random_adapter(&model, seed + 3, 0.05);
    let init = random_adapter(&model, seed + 4, 0.05);
    (model, buf, current, reference, init)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let cfg = GrpoConfig { beta: 0.3, fixed_kl: 0.1, ..Default::default() };
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..4 {
        let (model, buf, current, reference, init) = setup(seed);
        let batch = GrpoBatch::new(&model, &buf, &reference, &init, &cfg).unwrap();
        let grads = backward_adapter(&model, &batch, &current).unwrap();
        let err = fd_check(|a| loss_at(&model, &batch, a), &grads, &current, 1e-4, 12, &mut rng).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn coarser_step_gives_larger_error() {
    let cfg = GrpoConfig { beta: 0.3, fixed_kl: 0.1, ..Default::default() };
    let (model, buf, current, reference, init) = setup(7);
    let batch = GrpoBatch::new(&model, &buf, &reference, &init, &cfg).unwrap();
    let grads = backward_adapter(&model, &batch, &current).unwrap();
    let probe = |step: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        fd_check(|a| loss_at(&model, &batch, a), &grads, &current, step, 16, &mut rng).unwrap()
    };
    // below ~1e-3 round-off dominates; above it the O(h²) truncation term does
    let fine = probe(1e-2);
    let coarse = probe(1e-1);
    assert!(coarse > fine, "fine {fine} coarse {coarse}");
}

#[test]
fn zero_advantage_without_kl_has_zero_gradient() {
    let cfg = GrpoConfig { beta: 0.0, fixed_kl: 0.0, ..Default::default() };
    let (model, mut buf, current, reference, init) = setup(3);
    buf.advantages = vec![0.0; buf.trajectories.len()];
    let batch = GrpoBatch::new(&model, &buf, &reference, &init, &cfg).unwrap();
    let grads = backward_adapter(&model, &batch, &current).unwrap();
    assert!(grads.is_zero());
    assert_eq!(grads.terms.loss, 0.0);
}

#[test]
fn duplicated_group_has_the_same_gradient() {
    let cfg = GrpoConfig::default();
    let (model, buf, current, reference, init) = setup(5);
    let mut dup = buf.clone();
    dup.trajectories.extend(buf.trajectories.clone());
    dup.fill_advantages(&cfg);
    let g1 = backward_adapter(&model, &GrpoBatch::new(&model, &buf, &reference, &init, &cfg).unwrap(), &current)
        .unwrap()
        .flat();
    let g2 = backward_adapter(&model, &GrpoBatch::new(&model, &dup, &reference, &init, &cfg).unwrap(), &current)
        .unwrap()
        .flat();
    let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
    }
}

#[test]
fn ratio_one_at_the_generating_adapter() {
    let cfg = GrpoConfig::default();
    let model = random_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_adapter(&model, 12, 0.05);
    let mut buf = sampled_group(&model, Some(&a), 11, 4, &mut rng);
    buf.fill_advantages(&cfg);
    let (terms, stats) = grpo_loss(&model, &buf, &a, &a, &a, &cfg).unwrap();
    assert_eq!(stats.mean_ratio, 1.0);
    assert_eq!(stats.max_ratio, 1.0);
    assert_eq!(stats.mean_kl_ref, 0.0);
    // −(1/G) Σ Â_i, which vanishes because the advantages are centered
    let want = -buf.advantages.iter().sum::<f64>() / buf.advantages.len() as f64;
    assert!((terms.loss - want).abs() < 1e-12);
    assert!(terms.loss.abs() < 1e-12);

    let zero = GrpoConfig { ..cfg };
    buf.advantages = vec![0.0; 4];
    let other = random_adapter(&model, 13, 0.05);
    let (terms, stats) = grpo_loss(&model, &buf, &a, &other, &other, &zero).unwrap();
    assert_eq!(terms.policy_term, 0.0);
    let want = zero.beta * stats.mean_kl_ref + zero.fixed_kl * stats.mean_kl_init;
    // per-trajectory length normalization makes this exact only for equal lengths
    let lens: Vec<usize> = buf.trajectories.iter().map(|t| t.thought.len()).collect();
    if lens.iter().all(|l| *l == lens[0]) {
        assert!((terms.loss - want).abs() < 1e-12);
    }
    assert!(terms.loss > 0.0);
}

#[test]
fn clipped_tokens_carry_no_ratio_gradient() {
    let cfg = GrpoConfig { beta: 0.0, fixed_kl: 0.0, ..Default::default() };
    let model = random_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_adapter(&model, 22, 0.05);
    let mut buf = sampled_group(&model, Some(&a), 21, 2, &mut rng);
    for t in buf.trajectories.iter_mut() {
        for lp in t.old_logprobs.iter_mut() {
            *lp -= (1.0 + 2.0 * cfg.epsilon).ln();
        }
    }
    buf.advantages = vec![1.0, 0.5];
    let batch = GrpoBatch::new(&model, &buf, &a, &a, &cfg).unwrap();
    let grads = backward_adapter(&model, &batch, &a).unwrap();
    assert!(grads.is_zero());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut probe = a.clone();
    let base = loss_at(&model, &batch, &a).unwrap();
    for _ in 0..8 {
        let i = rng.gen_range(0..a.n_params());
        probe.set(i, a.get(i) + 1e-5);
        assert_eq!(loss_at(&model, &batch, &probe).unwrap(), base);
        probe.set(i, a.get(i));
    }
}

#[test]
fn loss_descends_over_three_steps() {
    let cfg = GrpoConfig::default();
    let model = random_model(31);
    let mut ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut adapter = AdapterParams::init(&model.cfg, 8, 16.0, seed);
        let mut buf = sampled_group(&model, Some(&adapter), seed, 3, &mut rng);
        buf.trajectories[0].reward = 0.8;
        buf.trajectories[1].reward = 0.0;
        buf.fill_advantages(&cfg);
        let init = adapter.clone();
        let batch = GrpoBatch::new(&model, &buf, &init, &init, &cfg).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default(), &adapter);
        let mut losses = vec![loss_at(&model, &batch, &adapter).unwrap()];
        for _ in 0..3 {
            let g = backward_adapter(&model, &batch, &adapter).unwrap();
            evolve::adapter::apply_update(&mut adapter, &g, &mut opt).unwrap();
            losses.push(loss_at(&model, &batch, &adapter).unwrap());
        }
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            ok += 1;
        }
    }
    assert!(ok >= 90, "{ok}/100 batches descended monotonically");
}

#[test]
fn degenerate_group_leaves_adapter_unchanged_without_kl() {
    let cfg = GrpoConfig { beta: 0.0, fixed_kl: 0.0, ..Default::default() };
    let model = random_model(41);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let adapter = AdapterParams::init(&model.cfg, 8, 16.0, 1);
    let mut state = AdaptationState::new(adapter.clone(), AdamConfig::default());
    let mut buf = sampled_group(&model, Some(&adapter), 41, 3, &mut rng);
    for t in buf.trajectories.iter_mut() {
        t.reward = 0.4;
    }
    internalize(&model, &mut buf, &mut state, &cfg).unwrap();
    assert_eq!(state.adapter.blocks, adapter.blocks);
}

#[test]
fn internalization_prefers_the_better_sibling() {
    let cfg = GrpoConfig::default();
    for seed in 0..5u64 {
        let model = random_model(50 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let adapter = AdapterParams::init(&model.cfg, 8, 16.0, seed);
        let mut state = AdaptationState::new(adapter.clone(), AdamConfig::default());
        let mut buf = sampled_group(&model, Some(&adapter), seed, 3, &mut rng);
        for (t, r) in buf.trajectories.iter_mut().zip([0.8, 0.0, 0.0]) {
            t.reward = r;
        }
        let mut seq = buf.prefix.clone();
        seq.extend(&buf.trajectories[0].thought);
        let plen = buf.prefix.len();
        let mean = |a: &AdapterParams| {
            let lp = rescore(&model, &seq, plen, Some(a)).unwrap();
            lp.iter().sum::<f64>() / lp.len() as f64
        };
        let before = mean(&state.adapter);
        internalize(&model, &mut buf, &mut state, &cfg).unwrap();
        assert!(mean(&state.adapter) > before, "seed {seed}");
    }
}

#[test]
fn single_step_never_lowers_the_best_trajectory() {
    let cfg = GrpoConfig { beta: 0.0, fixed_kl: 0.0, epochs: 1, ..Default::default() };
    for seed in 0..30u64 {
        let model = random_model(70 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
        let adapter = AdapterParams::init(&model.cfg, 8, 16.0, seed);
        let mut state = AdaptationState::new(adapter, AdamConfig::default());
        let mut buf = sampled_group(&model, Some(&state.adapter), seed, 4, &mut rng);
        let best = (0..4)
            .max_by(|&a, &b| buf.trajectories[a].reward.total_cmp(&buf.trajectories[b].reward).then(b.cmp(&a)))
            .unwrap();
        // only a unique maximum is well-defined: tied leaders trade mass
        let top = buf.trajectories[best].reward;
        if buf.trajectories.iter().filter(|t| t.reward == top).count() > 1 {
            continue;
        }
        let mut seq = buf.prefix.clone();
        seq.extend(&buf.trajectories[best].thought);
        let plen = buf.prefix.len();
        let sum = |a: &AdapterParams| rescore(&model, &seq, plen, Some(a)).unwrap().iter().sum::<f64>();
        let before = sum(&state.adapter);
        internalize(&model, &mut buf, &mut state, &cfg).unwrap();
        assert!(sum(&state.adapter) >= before, "seed {seed}");
    }
}

#[test]
fn ten_calls_sync_the_reference_once() {
    let cfg = GrpoConfig::default();
    let model = random_model(61);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut state = AdaptationState::new(AdapterParams::init(&model.cfg, 8, 16.0, 2), AdamConfig::default());
    let mut syncs = Vec::new();
    for call in 1..=10u64 {
        let mut buf = sampled_group(&model, Some(&state.adapter), call, 3, &mut rng);
        for (t, r) in buf.trajectories.iter_mut().zip([0.2, 0.0, 0.6]) {
            t.reward = r;
        }
        if internalize(&model, &mut buf, &mut state, &cfg).unwrap().ref_synced {
            syncs.push(call);
        }
    }
    assert_eq!(syncs, vec![10]);
    assert_eq!(state.reference.step, 10);
    assert_eq!(state.reference.adapter, state.adapter);
}

#[test]
fn solved_groups_are_rejected() {
    let model = random_model(62);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut state = AdaptationState::new(AdapterParams::init(&model.cfg, 8, 16.0, 2), AdamConfig::default());
    let mut buf = sampled_group(&model, None, 1, 2, &mut rng);
    buf.trajectories[1].reward = 1.0;
    assert!(internalize(&model, &mut buf, &mut state, &GrpoConfig::default()).is_err());
}

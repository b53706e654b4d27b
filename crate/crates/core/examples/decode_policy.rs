//! Greedy and sampled decodes from a base snapshot on a few generated tasks.
//!
//! cargo run --release --example decode_policy -- weights.bin [difficulty] [n] [temperature]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evolve::dsl::{evaluate_text, gen_task};
use evolve::policy::{snapshot::load_weights, PromptCache, ReasoningState, DEFAULT_MAX_NEW_TOKENS};

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("weights/base.bin"));
    let difficulty: u8 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let n: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let temperature: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let (model, header) = load_weights(&path)?;
    println!("snapshot {}", header.checksum);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..n {
        let task = gen_task(seed, difficulty)?;
        let state = ReasoningState::new(task.clone());
        let cache = PromptCache::for_state(&model, None, &state, DEFAULT_MAX_NEW_TOKENS)?;
        let tests: Vec<String> = task.tests.iter().map(|t| format!("{:?}->{}", t.input, t.expected)).collect();
        println!("\n{}  {}", task.task_id, tests.join("  "));
        if let Some(gold) = &task.hidden_solution {
            println!("  gold    {}", gold.render());
        }
        let g = cache.greedy(DEFAULT_MAX_NEW_TOKENS)?;
        println!("  greedy  {:<28} reward {:.1}", g.text, evaluate_text(&g.text, &task).reward);
        for _ in 0..3 {
            let s = cache.sample(temperature, DEFAULT_MAX_NEW_TOKENS, &mut rng)?;
            println!(
                "  T={temperature}   {:<28} reward {:.1}  mean logp {:.2}",
                s.text,
                evaluate_text(&s.text, &task).reward,
                s.mean_logprob()
            );
        }
    }
    Ok(())
}

//! Greedy vs search-only vs full adaptation on a small generated suite.
//!
//! cargo run --release --example compare_methods -- weights.bin [n_tasks] [lr]

use std::path::PathBuf;
use std::time::Instant;

use evolve::dsl::{evaluate_text, gen_task};
use evolve::evolution::{solve, EvolutionConfig};
use evolve::policy::{greedy_decode, snapshot::load_weights, ReasoningState, DEFAULT_MAX_NEW_TOKENS};

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("weights/base.bin"));
    let n: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let (model, _) = load_weights(&path)?;
    let tasks: Vec<_> = (0..n).map(|i| gen_task(i, 2 + (i % 3) as u8)).collect::<Result<_, _>>()?;

    let mut greedy = 0;
    for t in &tasks {
        let th = greedy_decode(&model, &ReasoningState::new(t.clone()), None, DEFAULT_MAX_NEW_TOKENS)?;
        greedy += evaluate_text(&th.text, t).solved() as usize;
    }
    println!("greedy       {greedy}/{n}");
    for adapt in [false, true] {
        let mut cfg = EvolutionConfig { adaptation_enabled: adapt, ..Default::default() };
        cfg.adam.lr = lr;
        let t0 = Instant::now();
        let (mut solved, mut nodes) = (0, 0);
        for (i, t) in tasks.iter().enumerate() {
            let out = solve(&model, t, &cfg, i as u64)?;
            solved += out.report.solved as usize;
            nodes += out.report.ledger.nodes_generated;
        }
        println!(
            "{:12} {solved}/{n}  nodes {nodes}  {:.1}s",
            if adapt { "pot" } else { "search_only" },
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

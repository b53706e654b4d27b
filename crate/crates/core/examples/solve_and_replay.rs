//! Solves one task with adaptation, writes its trace, replays it and checks
//! that the replay matches event for event.
//!
//! cargo run --release --example solve_and_replay -- [weights.bin] [task_seed] [trace.jsonl]

use std::path::PathBuf;

use evolve::dsl::gen_task;
use evolve::evolution::{replay, solve, EvolutionConfig};
use evolve::policy::snapshot::load_weights;
use evolve::trace::{first_divergence, Event};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("crates/core/weights/base.bin"));
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let trace_path = PathBuf::from(args.get(3).map(String::as_str).unwrap_or("solve_trace.jsonl"));
    let (model, _) = load_weights(&path)?;
    let task = gen_task(seed, 3)?;

    let out = solve(&model, &task, &EvolutionConfig::default(), 7)?;
    std::fs::write(&trace_path, out.trace.to_jsonl())?;
    let r = &out.report;
    println!(
        "{}: solved {} reward {:.2} after {} nodes, {} updates; {} events -> {}",
        r.task_id,
        r.solved,
        r.reward,
        r.ledger.nodes_generated,
        r.internalizations,
        out.trace.events.len(),
        trace_path.display()
    );
    for e in out.trace.events.iter().filter(|e| matches!(e, Event::Update { .. })).take(3) {
        println!("  {}", serde_json::to_string(e)?);
    }

    let again = replay(&model, r, Some(&out.trace.events))?;
    match first_divergence(&out.trace.events, &again.trace.events) {
        None => println!("replay identical ({} events)", again.trace.events.len()),
        Some((i, a, b)) => println!("replay diverged at {i}: {a:?} vs {b:?}"),
    }
    Ok(())
}

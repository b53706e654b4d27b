//! Runs search without adaptation on one task and prints the tree.
//!
//! cargo run --release --example search_tree -- [weights.bin] [task_seed] [difficulty]

use std::path::PathBuf;

use evolve::dsl::gen_task;
use evolve::evolution::{solve, EvolutionConfig};
use evolve::policy::snapshot::load_weights;

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("crates/core/weights/base.bin"));
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let difficulty = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let (model, _) = load_weights(&path)?;
    let task = gen_task(seed, difficulty)?;
    let cfg = EvolutionConfig { adaptation_enabled: false, ..Default::default() };
    let out = solve(&model, &task, &cfg, 0)?;

    let tree = &out.tree;
    for id in 0..tree.nodes.len() {
        let node = &tree.nodes[id];
        let text = node.thought.as_ref().map_or("<root>", |t| t.text.as_str());
        println!(
            "{}#{id:<3} N={:<3} Q={:.3} P={:.3} r={:.2}{} {text}",
            "  ".repeat(node.depth),
            node.n,
            node.q(),
            node.prior,
            node.reward,
            if node.pruned { " pruned" } else { "" },
        );
    }
    let r = &out.report;
    println!(
        "\nsolved {} reward {:.2} nodes {} phases {} best {:?}",
        r.solved, r.reward, r.ledger.nodes_generated, r.ledger.simulations, r.final_program
    );
    Ok(())
}

//! Sweeps the branching factor over a small suite and prints the table.
//!
//! cargo run --release --example ablation_grid -- [weights.bin] [n_tasks] [grid] [out_dir]

use std::path::PathBuf;

use evolve::evolution::EvolutionConfig;
use evolve::harness::{gen_suite, markdown_table, parse_mix, run_ablation, ExperimentConfig, Grid, Method};
use evolve::policy::snapshot::load_weights;

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("crates/core/weights/base.bin"));
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let grid = Grid::parse(args.get(3).map(String::as_str).unwrap_or("k=1,2,3"))?;
    let out = PathBuf::from(args.get(4).map(String::as_str).unwrap_or("ablation_out"));
    let (model, _) = load_weights(&path)?;
    let tasks = gen_suite(n, &parse_mix("2:1,3:1,4:1")?, 1)?;

    let mut evolution = EvolutionConfig::default();
    evolution.search.max_simulations = 10;
    let base = ExperimentConfig {
        weights: path,
        weights_checksum: None,
        suite: PathBuf::new(),
        method: Method::Pot,
        best_of_n: 60,
        seeds: vec![1],
        out: out.clone(),
        workers: 0,
        evolution,
    };
    let cells = run_ablation(&model, &tasks, &base, &grid, &out)?;
    println!("{}", markdown_table(&cells.into_iter().map(|c| c.summary).collect::<Vec<_>>()));
    println!("run directories under {}", out.display());
    Ok(())
}

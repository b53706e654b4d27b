//! Fits the forward/backward cost model to measured solves and checks the
//! prediction against the measured wall clock.
//!
//! cargo run --release --example budget_estimate -- [weights.bin] [n_tasks]

use std::path::PathBuf;

use evolve::dsl::gen_task;
use evolve::evolution::{estimate_budget, merge_walls, solve, EvolutionConfig, PhaseWall, WallClock};
use evolve::policy::snapshot::load_weights;

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("crates/core/weights/base.bin"));
    let n: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let (model, _) = load_weights(&path)?;

    let reference = WallClock {
        total_ns: 473_660_000,
        forward_ns: 192_660_000,
        backward_ns: 281_000_000,
        phases: vec![PhaseWall { forward_ns: 192_660_000, backward_ns: 281_000_000 }],
    };
    let est = estimate_budget(&reference)?;
    println!("reference phase: rho = {:.4} (~{:.2})", est.rho, est.rho_rounded());

    for adapt in [false, true] {
        let cfg = EvolutionConfig { adaptation_enabled: adapt, ..Default::default() };
        let mut walls = Vec::new();
        for i in 0..n {
            walls.push(solve(&model, &gen_task(100 + i, 3)?, &cfg, i)?.wall);
        }
        let est = estimate_budget(&merge_walls(&walls))?;
        println!(
            "{:<11} phases {:3}  fwd {:6.1} ms/phase  bwd {:6.1} ms/phase  rho {:.2}  predicted {:7.0} ms  measured {:7.0} ms  ({:.1}% off)",
            if adapt { "pot" } else { "search_only" },
            est.phases,
            est.cost_fwd_ms,
            est.cost_bwd_ms,
            est.rho,
            est.predicted_ms,
            est.actual_ms,
            100.0 * est.relative_error
        );
    }
    Ok(())
}

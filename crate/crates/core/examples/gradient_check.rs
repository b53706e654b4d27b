//! Compares the analytic GRPO gradient with central finite differences on
//! sampled groups.
//!
//! cargo run --release --example gradient_check -- [weights.bin] [groups]

use std::path::PathBuf;

use evolve::grpo::{grad_check, GradCheckConfig};
use evolve::policy::snapshot::load_weights;

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("crates/core/weights/base.bin"));
    let groups = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (model, _) = load_weights(&path)?;
    let cfg = GradCheckConfig { groups, ..Default::default() };
    let report = grad_check(&model, &cfg)?;
    for (g, err) in report.per_group.iter().enumerate() {
        println!("group {g}: max relative error {err:.3e}");
    }
    println!("{} coordinates, worst {:.3e}", report.coords, report.worst);
    Ok(())
}

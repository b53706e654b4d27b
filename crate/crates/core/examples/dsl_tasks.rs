//! Generates tasks, runs programs against them and shows the reward.
//!
//! cargo run --release --example dsl_tasks -- [difficulty] [n]

use evolve::dsl::{evaluate_text, execute, gen_task, parse_program, shortest_equivalent, DEFAULT_STEP_CAP};

fn main() -> evolve::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let difficulty: u8 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let n: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);

    let square_plus_one = parse_program("DUP MUL PUSH 1 ADD")?;
    println!("{square_plus_one} on [7] -> {:?}", execute(&square_plus_one, &[7], DEFAULT_STEP_CAP));
    let loop_prog = parse_program("PUSH 0 SWAP REPEAT 3 DUP END DROP")?;
    println!("{loop_prog} on [4] -> {:?}\n", execute(&loop_prog, &[4], DEFAULT_STEP_CAP));

    for seed in 0..n {
        let task = gen_task(seed, difficulty)?;
        println!("{} ({} tests)", task.task_id, task.tests.len());
        for t in &task.tests {
            println!("  {:?} -> {}", t.input, t.expected);
        }
        let gold = task.hidden_solution.clone().unwrap();
        let short = shortest_equivalent(&task, 4).map_or("-".to_string(), |p| p.render());
        println!("  hidden:   {gold}\n  shortest: {short}");
        for text in [gold.render(), "ADD".to_string(), "PUSH".to_string(), "DROP DROP DROP".to_string()] {
            let r = evaluate_text(&text, &task);
            println!("  {:<28} reward {:.2} ({}/{}) fault {:?}", text, r.reward, r.n_pass, r.n_total, r.fault);
        }
        println!();
    }
    Ok(())
}

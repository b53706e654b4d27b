//! Acceptance suite: one PASS/FAIL line per criterion and a closing count.
//! `ACCEPTANCE_STRICT=1` turns any failed criterion into a non-zero exit.
//! `ACCEPTANCE_QUICK=1` skips the suite-scale runs (6 to 9 and the live
//! half of 12).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evolve::adapter::AdapterParams;
use evolve::dsl::{evaluate, evaluate_text, gen_task, parse_program, reward_value, TaskInstance, TestCase};
use evolve::evolution::{estimate_budget, PhaseWall, WallClock};
use evolve::grpo::{compute_advantages, grad_check, internalize, AdaptationState, GradCheckConfig, GroupBuffer, GrpoConfig, Trajectory};
use evolve::harness::{
    gen_suite, load_suite, parse_mix, read_trace_for, replay_record, run_suite, run_suite_inspect, ExperimentConfig, JobResult,
    Method, SuiteSummary, TaskRecord,
};
use evolve::harness::read_jsonl;
use evolve::policy::snapshot::load_weights;
use evolve::policy::{greedy_decode, BaseWeights, PromptCache, ReasoningState};
use evolve::search::{puct_select, ChildView};
use evolve::trace::Event;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: u32, name: &str, o: &Outcome) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "criterion {id:2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn skip(id: u32, name: &str) {
    let _ = writeln!(std::io::stderr(), "criterion {id:2} SKIP {name}: ACCEPTANCE_QUICK is set");
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&manifest_dir().join("configs/desk.toml")).expect("desk config")
}

fn snapshot() -> BaseWeights {
    load_weights(&manifest_dir().join("weights/base.bin")).expect("bundled snapshot").0
}

// 1 ----------------------------------------------------------------------

/// A task whose `n_total` tests the program `DROP` passes exactly `n_pass` of.
fn counted_task(n_pass: usize, n_total: usize) -> TaskInstance {
    let tests = (0..n_total)
        .map(|i| {
            let a = i as i64 + 1;
            TestCase {
                input: vec![a, -a],
                expected: if i < n_pass { a } else { a + 100 },
            }
        })
        .collect();
    TaskInstance { task_id: format!("c{n_pass}/{n_total}"), difficulty: 1, tests, hidden_solution: None }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let drop = parse_program("DROP").unwrap();
    let mut combos = 0;
    let mut bad = Vec::new();
    for n_total in 0..=8usize {
        for n_pass in 0..=n_total {
            combos += 1;
            let want = if n_pass == n_total {
                1.0
            } else if n_pass > 0 {
                n_pass as f64 / n_total as f64
            } else {
                0.0
            };
            let task = counted_task(n_pass, n_total);
            let got = evaluate(&drop, &task);
            if got.reward.to_bits() != want.to_bits() || got.n_pass != n_pass || reward_value(n_pass, n_total) != want {
                bad.push(format!("({n_pass},{n_total}) -> {}", got.reward));
            }
            for text in ["PUSH", "DROP END", "FROB", "PUSH 1 REPEAT 2 ADD", ""] {
                let r = evaluate_text(text, &task);
                let fault_ok = text.is_empty() && n_total == 0 || r.reward == 0.0;
                if !fault_ok {
                    bad.push(format!("{text:?} on ({n_pass},{n_total}) -> {}", r.reward));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && combos == 45 && secs < 1.0,
        format!("{combos} combinations plus parse faults, {} mismatches, {secs:.3}s", bad.len()),
    )
}

// 2 ----------------------------------------------------------------------

fn criterion_2(model: &BaseWeights) -> Outcome {
    let t0 = Instant::now();
    let mut mismatches = 0;
    for i in 0..50u64 {
        let task = gen_task(5_000 + i, 1 + (i % 4) as u8).unwrap();
        let state = ReasoningState::new(task);
        let fresh = AdapterParams::init(&model.cfg, 8, 16.0, 77 + i);
        let base = greedy_decode(model, &state, None, 96).unwrap();
        let adapted = greedy_decode(model, &state, Some(&fresh), 96).unwrap();
        let same = base.tokens == adapted.tokens
            && base.gen_logprobs.len() == adapted.gen_logprobs.len()
            && base.gen_logprobs.iter().zip(&adapted.gen_logprobs).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += (!same) as usize;
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(mismatches == 0 && secs < 30.0, format!("50 tasks, {mismatches} bitwise mismatches, {secs:.1}s"))
}

// 3 ----------------------------------------------------------------------

fn criterion_3(model: &BaseWeights) -> Outcome {
    let t0 = Instant::now();
    let cfg = GradCheckConfig { groups: 10, coords_per_group: 10, step: 1e-4, seed: 3, ..Default::default() };
    let r = grad_check(model, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        r.coords >= 100 && r.worst < 1e-4 && secs < 120.0,
        format!("{} coordinates over {} groups, max relative error {:.2e}, {secs:.1}s", r.coords, cfg.groups, r.worst),
    )
}

// 4 ----------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let cfg = GrpoConfig { adv_clip: 1e300, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_mean, mut worst_std, mut groups) = (0.0f64, 0.0f64, 0);
    while groups < 10_000 {
        let g = rng.gen_range(2..=8);
        let r: Vec<f64> = (0..g).map(|_| rng.gen::<f64>()).collect();
        let mean = r.iter().sum::<f64>() / g as f64;
        let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g as f64).sqrt();
        if sd <= cfg.eta {
            continue;
        }
        groups += 1;
        let a = compute_advantages(&r, &cfg);
        let am = a.iter().sum::<f64>() / g as f64;
        let asd = (a.iter().map(|x| (x - am) * (x - am)).sum::<f64>() / g as f64).sqrt();
        worst_mean = worst_mean.max(am.abs());
        worst_std = worst_std.max((asd - 1.0).abs());
    }
    let mut equal_ok = true;
    for _ in 0..1000 {
        let g = rng.gen_range(2..=8);
        let v = rng.gen_range(0..=5) as f64 / 5.0;
        equal_ok &= compute_advantages(&vec![v; g], &GrpoConfig::default()).iter().all(|x| *x == 0.0);
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_mean < 1e-12 && worst_std < 1e-9 && equal_ok && secs < 5.0,
        format!(
            "10^4 groups: max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}; all-equal groups zero: {equal_ok}; {secs:.2}s"
        ),
    )
}

// 5 ----------------------------------------------------------------------

fn brute_force_puct(children: &[ChildView], c: f64) -> Option<usize> {
    let visits: f64 = children.iter().map(|ch| ch.n as f64).sum();
    let score = |ch: &ChildView| {
        let exploit = if ch.n > 0 { ch.q } else { 0.0 };
        exploit + c * ch.prior * visits.sqrt() / (ch.n as f64 + 1.0)
    };
    let best = children.iter().filter(|ch| ch.selectable).map(score).fold(f64::NEG_INFINITY, f64::max);
    children.iter().position(|ch| ch.selectable && score(ch) == best)
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut disagreements, mut ties) = (0, 0);
    let template = ChildView { q: 0.6, n: 3, prior: 0.2, selectable: true };
    for case in 0..1000 {
        let m = rng.gen_range(1..=8);
        let children: Vec<ChildView> = (0..m)
            .map(|_| {
                if case % 4 == 0 && rng.gen_bool(0.6) {
                    template
                } else {
                    let n = rng.gen_range(0..6);
                    ChildView {
                        q: if n == 0 { 0.0 } else { rng.gen_range(0..=10) as f64 / 10.0 },
                        n,
                        prior: rng.gen::<f64>(),
                        selectable: rng.gen_bool(0.85),
                    }
                }
            })
            .collect();
        ties += (children.iter().filter(|c| **c == template).count() > 1) as usize;
        let c = [0.5, 1.0, 1.414, 2.5][case % 4];
        disagreements += (puct_select(&children, c) != brute_force_puct(&children, c)) as usize;
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        disagreements == 0 && ties > 0 && secs < 1.0,
        format!("1000 node states ({ties} with ties), {disagreements} disagreements, {secs:.3}s"),
    )
}

// 6, 7 --------------------------------------------------------------------

#[derive(Default)]
struct TreeChecks {
    solves: usize,
    worst_q_error: f64,
    q_failures: usize,
    max_nodes: usize,
    budget_violations: usize,
    quiescence_violations: usize,
    verify_secs: f64,
}

impl TreeChecks {
    fn inspect(&mut self, res: &JobResult, node_budget: usize) {
        let Some(tree) = &res.tree else { return };
        let t0 = Instant::now();
        self.solves += 1;
        for (node, (n, q)) in tree.nodes.iter().zip(tree.replay_log()) {
            let err = (node.q() - q).abs();
            self.worst_q_error = self.worst_q_error.max(err);
            if node.n != n || err > 1e-12 {
                self.q_failures += 1;
            }
        }
        let nodes = res.record.ledger.nodes_generated;
        self.max_nodes = self.max_nodes.max(nodes);
        if nodes > node_budget || tree.nodes.len() - 1 != nodes {
            self.budget_violations += 1;
        }
        let events = &res.events;
        if let Some(i) = events.iter().position(|e| matches!(e, Event::Evaluate { reward, .. } if *reward == 1.0)) {
            let generated_before = events[..i].iter().filter(|e| matches!(e, Event::Generate { .. })).count();
            let later = events[i + 1..]
                .iter()
                .any(|e| matches!(e, Event::Generate { .. } | Event::Update { .. } | Event::Commit { .. }));
            if later || generated_before != nodes || !res.record.solved {
                self.quiescence_violations += 1;
            }
        }
        self.verify_secs += t0.elapsed().as_secs_f64();
    }
}

// 8, 9, 12 ------------------------------------------------------------------

struct SuiteRuns {
    greedy: SuiteSummary,
    search_only: SuiteSummary,
    pot: SuiteSummary,
    pot_k1: SuiteSummary,
    pot_k2: SuiteSummary,
    ordering_secs: f64,
    checks: TreeChecks,
}

fn suite_runs(model: &BaseWeights, base: &ExperimentConfig, tasks: &[TaskInstance], out: &Path) -> SuiteRuns {
    let mut checks = TreeChecks::default();
    let budget = base.evolution.search.node_budget();
    let run = |method: Method, k: usize, dir: &str, checks: &mut TreeChecks| {
        let mut cfg = base.clone();
        cfg.method = method;
        cfg.evolution.search.k = k;
        let t0 = Instant::now();
        let s = run_suite_inspect(model, tasks, &cfg, &out.join(dir), |r| {
            if k == base.evolution.search.k {
                checks.inspect(r, budget);
            }
            Ok(())
        })
        .unwrap();
        let _ = writeln!(
            std::io::stderr(),
            "    {dir}: solve rate {:.4} (per seed {:?}), {:.0}s",
            s.solve_rate,
            s.per_seed.iter().map(|p| p.solve_rate).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
        s
    };
    let k = base.evolution.search.k;
    let t0 = Instant::now();
    let greedy = run(Method::Greedy, k, "greedy", &mut checks);
    let search_only = run(Method::SearchOnly, k, "search_only", &mut checks);
    let pot = run(Method::Pot, k, "pot", &mut checks);
    let ordering_secs = t0.elapsed().as_secs_f64();
    let pot_k1 = run(Method::Pot, 1, "pot_k1", &mut checks);
    let pot_k2 = run(Method::Pot, 2, "pot_k2", &mut checks);
    SuiteRuns { greedy, search_only, pot, pot_k1, pot_k2, ordering_secs, checks }
}

fn criterion_8(r: &SuiteRuns) -> Outcome {
    let (g, s, p) = (r.greedy.solve_rate, r.search_only.solve_rate, r.pot.solve_rate);
    let ordered = p > s && s > g;
    let margins = p - s >= 0.05 && s - g >= 0.05;
    let minutes = r.ordering_secs / 60.0;
    outcome(
        ordered && margins && minutes <= 30.0,
        format!(
            "greedy {:.2}% < search_only {:.2}% < pot {:.2}% (margins {:+.2} / {:+.2} pp), {minutes:.1} min on {} worker(s)",
            100.0 * g,
            100.0 * s,
            100.0 * p,
            100.0 * (p - s),
            100.0 * (s - g),
            evolve::harness::worker_count(0)
        ),
    )
}

fn criterion_9(r: &SuiteRuns) -> Outcome {
    let runs = [&r.pot_k1, &r.pot_k2, &r.pot];
    let rates = runs.map(|s| s.solve_rate);
    // positions processed per phase (forward plus backward) is the
    // deterministic cost; wall time per phase is reported alongside
    let cost = runs.map(|s| s.mean_phase_positions);
    let wall = runs.map(|s| s.mean_phase_cost_ms);
    outcome(
        rates[0] < rates[2] && cost[0] < cost[1] && cost[1] < cost[2],
        format!(
            "solve rate k=1 {:.2}% / k=2 {:.2}% / k=3 {:.2}%; positions per phase {:.0} / {:.0} / {:.0} ({:.1} / {:.1} / {:.1} ms)",
            100.0 * rates[0],
            100.0 * rates[1],
            100.0 * rates[2],
            cost[0],
            cost[1],
            cost[2],
            wall[0],
            wall[1],
            wall[2]
        ),
    )
}

// 10 ---------------------------------------------------------------------

fn kl_batch(model: &BaseWeights, cfg: &ExperimentConfig) -> Vec<GroupBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = &cfg.evolution.search;
    let mut groups = Vec::new();
    let mut seed = 7_000;
    while groups.len() < 8 {
        seed += 1;
        let task = gen_task(seed, 2 + (seed % 3) as u8).unwrap();
        let cache = PromptCache::for_state(model, None, &ReasoningState::new(task.clone()), s.max_new_tokens).unwrap();
        let trajectories: Vec<Trajectory> = (0..s.k)
            .map(|_| {
                let th = cache.sample(s.temperature, s.max_new_tokens, &mut rng).unwrap();
                let reward = evaluate_text(&th.text, &task).reward;
                Trajectory { thought: th.tokens, old_logprobs: th.gen_logprobs, reward }
            })
            .collect();
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        if rewards.iter().any(|r| *r >= 1.0) || rewards.iter().all(|r| *r == rewards[0]) {
            continue;
        }
        groups.push(GroupBuffer::new(0, cache.prompt.clone(), trajectories).unwrap());
    }
    groups
}

fn criterion_10(model: &BaseWeights, cfg: &ExperimentConfig) -> Outcome {
    let batch = kl_batch(model, cfg);
    let betas = [0.002, 0.02, 0.2];
    let mut kls = Vec::new();
    for &beta in &betas {
        let grpo = GrpoConfig { beta, ..cfg.evolution.grpo };
        let adapter = AdapterParams::init(&model.cfg, cfg.evolution.rank, cfg.evolution.alpha, 10);
        let mut state = AdaptationState::new(adapter, cfg.evolution.adam);
        let mut sum = 0.0;
        for g in &batch {
            let mut g = g.clone();
            sum += internalize(model, &mut g, &mut state, &grpo).unwrap().post.mean_kl_ref;
        }
        kls.push(sum / batch.len() as f64);
    }
    outcome(
        kls[0] >= kls[1] && kls[1] >= kls[2],
        format!(
            "mean post-update KL over {} groups: beta 0.002 -> {:.3e}, 0.02 -> {:.3e}, 0.2 -> {:.3e}",
            batch.len(),
            kls[0],
            kls[1],
            kls[2]
        ),
    )
}

// 11 ---------------------------------------------------------------------

fn criterion_11(model: &BaseWeights, base: &ExperimentConfig, out: &Path) -> Outcome {
    let tasks: Vec<TaskInstance> = (0..4).map(|i| gen_task(11_000 + i, 2 + (i % 3) as u8).unwrap()).collect();
    let mut cfg = base.clone();
    cfg.method = Method::Pot;
    cfg.seeds = vec![1, 2];
    cfg.evolution.search.max_simulations = 8;
    cfg.workers = 1;
    let a = out.join("det-a");
    let b = out.join("det-b");
    run_suite(model, &tasks, &cfg, &a).unwrap();
    cfg.workers = 3;
    run_suite(model, &tasks, &cfg, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let traces_equal = same("trace.jsonl") && same("reports.jsonl");
    let records: Vec<TaskRecord> = read_jsonl(&a.join("reports.jsonl")).unwrap();
    let mut replay_failures = 0;
    for r in &records {
        let events = read_trace_for(&a.join("trace.jsonl"), &r.task_id, r.seed).unwrap();
        replay_failures += replay_record(model, r, Some(&events)).is_err() as usize;
    }
    outcome(
        traces_equal && replay_failures == 0,
        format!(
            "two runs (1 and 3 workers) byte-identical: {traces_equal}; {} stored reports replayed, {replay_failures} divergent",
            records.len()
        ),
    )
}

// 12 ---------------------------------------------------------------------

fn criterion_12(runs: Option<&SuiteRuns>) -> Outcome {
    let ms = 1_000_000u64;
    let wall = WallClock {
        total_ns: 473_660_000,
        forward_ns: 192_660_000,
        backward_ns: 281 * ms,
        phases: vec![PhaseWall { forward_ns: 192_660_000, backward_ns: 281 * ms }],
    };
    let est = estimate_budget(&wall).unwrap();
    let rho_ok = est.rho_rounded() == 1.46;
    let mut detail = format!("table components give rho {:.4} -> {:.2}", est.rho, est.rho_rounded());
    let live_ok = match runs {
        Some(r) => {
            let mut ok = true;
            for s in [&r.pot, &r.search_only] {
                let b = s.budget.as_ref().unwrap();
                ok &= b.relative_error < 0.25;
                detail.push_str(&format!(
                    "; {} live: predicted {:.0} ms vs measured {:.0} ms ({:.1}% off, rho {:.2})",
                    s.method.name(),
                    b.predicted_ms,
                    b.actual_ms,
                    100.0 * b.relative_error,
                    b.rho
                ));
            }
            ok
        }
        None => {
            detail.push_str("; live check skipped");
            true
        }
    };
    outcome(rho_ok && live_ok, detail)
}

fn main() {
    let quick = std::env::var("ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let model = snapshot();
    let cfg = desk_config();
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut record = |id: u32, name: &str, o: Outcome| {
        report(id, name, &o);
        failures += (!o.pass) as usize;
    };

    record(1, "reward exactness", criterion_1());
    record(2, "adapter identity at init", criterion_2(&model));
    record(3, "gradient correctness", criterion_3(&model));
    record(4, "advantage statistics", criterion_4());
    record(5, "PUCT oracle equivalence", criterion_5());

    let runs = (!quick).then(|| {
        let tasks = load_suite(&cfg.suite).unwrap();
        let regenerated = gen_suite(100, &parse_mix("2:1,3:1,4:1").unwrap(), 2024).unwrap();
        assert!(tasks.iter().zip(&regenerated).all(|(a, b)| a.task_id == b.task_id && a.tests == b.tests));
        suite_runs(&model, &cfg, &tasks, tmp.path())
    });
    match &runs {
        Some(r) => {
            let c = &r.checks;
            record(
                6,
                "Q-value conservation",
                outcome(
                    c.q_failures == 0 && c.solves > 0 && c.verify_secs < 10.0,
                    format!(
                        "{} solves replayed, max |Q - mean| {:.1e}, {} mismatches, {:.2}s",
                        c.solves, c.worst_q_error, c.q_failures, c.verify_secs
                    ),
                ),
            );
            record(
                7,
                "budget cap and early termination",
                outcome(
                    c.budget_violations == 0 && c.quiescence_violations == 0,
                    format!(
                        "{} solves over 100 tasks: max {} nodes (cap {}), {} cap violations, {} post-solve generations",
                        c.solves,
                        c.max_nodes,
                        cfg.evolution.search.node_budget(),
                        c.budget_violations,
                        c.quiescence_violations
                    ),
                ),
            );
            record(8, "ablation ordering", criterion_8(r));
            record(9, "branching ablation", criterion_9(r));
        }
        None => {
            for (id, name) in [(6, "Q-value conservation"), (7, "budget cap and early termination"), (8, "ablation ordering"), (9, "branching ablation")] {
                skip(id, name);
            }
        }
    }
    record(10, "KL control", criterion_10(&model, &cfg));
    record(11, "determinism", criterion_11(&model, &cfg, tmp.path()));
    record(12, "budget model", criterion_12(runs.as_ref()));

    let _ = writeln!(std::io::stderr(), "acceptance: {failures} criterion(s) failed");
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

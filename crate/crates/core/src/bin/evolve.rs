//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error. `POT_SEED` overrides the default seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evolve::dsl::write_task_files;
use evolve::grpo::{grad_check, GradCheckConfig};
use evolve::harness::{
    gen_suite, load_model, load_suite, markdown_table, parse_mix, read_jsonl, read_trace_for, replay_record,
    run_ablation, run_suite, summary_csv, verify_run, ExperimentConfig, Grid, Method, TaskRecord,
};
use evolve::policy::snapshot::{load_weights, save_weights};
use evolve::policy::{BaseWeights, ModelConfig};
use evolve::pretrain::{gen_corpus, pretrain, write_corpus, CorpusConfig, PretrainConfig};

#[derive(Parser)]
#[command(name = "evolve", version, about = "Test-time policy evolution over a stack-machine DSL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an evaluation task suite and its hidden-solution manifest.
    GenTasks {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// difficulty:weight pairs
        #[arg(long, default_value = "2:1,3:1,4:1")]
        mix: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a base snapshot on a generated corpus.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60_000)]
        examples: usize,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value = "1:0.35,2:0.3,3:0.2,4:0.15")]
        mix: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the corpus as JSON lines.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run one method over a suite and write reports, traces and summaries.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one ablation grid (k=1,2,3 | beta=... | r:lr=8:1e-3,...).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute and print summaries of finished runs.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Aggregate runs over different task sets.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the adaptation gradient.
    GradCheck {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long, default_value_t = 10)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run a stored solve and compare it byte for byte.
    Replay {
        /// A run directory holding reports.jsonl and trace.jsonl.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Record index in reports.jsonl (default: every record).
        #[arg(long)]
        index: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(evolve::Error),
}

impl From<evolve::Error> for Failure {
    fn from(e: evolve::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: evolve::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn default_seed() -> Result<u64, Failure> {
    match std::env::var("POT_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("POT_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Failure::Usage(format!("bad seed list {s:?}"))))
        .collect()
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        evolve::Error::Io { .. } => Failure::Runtime(e),
        e => usage(e),
    })?;
    if cfg.seeds.is_empty() {
        cfg.seeds = vec![default_seed()?];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTasks { n, mix, seed, out, manifest } => {
            let mix = parse_mix(&mix).map_err(usage)?;
            let seed = match seed {
                Some(s) => s,
                None => default_seed()?,
            };
            let tasks = gen_suite(n, &mix, seed).map_err(usage)?;
            let manifest = manifest.unwrap_or_else(|| out.with_extension("solutions.jsonl"));
            write_task_files(&tasks, &out, &manifest)?;
            println!("wrote {} tasks to {} (solutions: {})", tasks.len(), out.display(), manifest.display());
        }
        Command::Pretrain { out, examples, epochs, batch_size, lr, mix, seed, corpus } => {
            let difficulty_mix = parse_mix(&mix).map_err(usage)?;
            if epochs == 0 || batch_size == 0 || !(lr > 0.0) {
                return Err(Failure::Usage("epochs, batch size and lr must be positive".into()));
            }
            let seed = match seed {
                Some(s) => s,
                None => default_seed()?,
            };
            let cc = CorpusConfig { n: examples, difficulty_mix, seed, ..Default::default() };
            let data = gen_corpus(&cc).map_err(usage)?;
            if let Some(path) = &corpus {
                write_corpus(&data, path)?;
            }
            let pc = PretrainConfig { epochs, batch_size, lr, seed, ..Default::default() };
            let (model, curve) = pretrain(&data, &pc, |p| {
                if p.step % 50 == 0 {
                    eprintln!("step {:6} loss {:.4}", p.step, p.loss);
                }
            })?;
            let first = curve.first().map_or(f64::NAN, |p| p.loss);
            let last = curve.last().map_or(f64::NAN, |p| p.loss);
            let meta = serde_json::json!({ "corpus": cc, "pretrain": pc, "initial_loss": first, "final_loss": last });
            let sum = save_weights(&model, &out, meta)?;
            println!("loss {first:.4} -> {last:.4}; saved {} ({sum})", out.display());
        }
        Command::Solve { config, method, seeds, out, workers } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.method = Method::parse(&m).ok_or_else(|| Failure::Usage(format!("unknown method {m:?}")))?;
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            cfg.validate().map_err(usage)?;
            let model = load_model(&cfg)?;
            let tasks = load_suite(&cfg.suite)?;
            let s = run_suite(&model, &tasks, &cfg, &out)?;
            println!(
                "{} over {} tasks x {} seeds: solve rate {:.4}, mean reward {:.4}, mean nodes {:.2} -> {}",
                s.method.name(),
                s.n_tasks,
                s.per_seed.len(),
                s.solve_rate,
                s.mean_reward,
                s.mean_nodes,
                out.display()
            );
        }
        Command::Ablate { config, grid, out } => {
            let cfg = load_config(&config)?;
            let grid = Grid::parse(&grid).map_err(usage)?;
            for (_, c) in grid.cells(&cfg) {
                c.validate().map_err(usage)?;
            }
            let model = load_model(&cfg)?;
            let tasks = load_suite(&cfg.suite)?;
            let out = out.unwrap_or_else(|| cfg.out.clone());
            for c in run_ablation(&model, &tasks, &cfg, &grid, &out)? {
                let s = &c.summary;
                println!(
                    "{:16} solve rate {:.4}  phase cost {:.2} ms ({:.0} positions)  post KL {}",
                    c.cell,
                    s.solve_rate,
                    s.mean_phase_cost_ms,
                    s.mean_phase_positions,
                    s.mean_post_kl.map_or("-".into(), |k| format!("{k:.3e}"))
                );
            }
        }
        Command::Report { runs, format, force } => {
            let mut summaries = Vec::new();
            let mut task_sets = Vec::new();
            for dir in &runs {
                summaries.push(verify_run(dir)?);
                let records: Vec<TaskRecord> = read_jsonl(&dir.join("reports.jsonl"))?;
                let mut set: Vec<(String, u64)> = records.into_iter().map(|r| (r.task_fingerprint, r.seed)).collect();
                set.sort();
                task_sets.push(set);
            }
            if !force && task_sets.windows(2).any(|w| w[0] != w[1]) {
                return Err(Failure::Runtime(evolve::Error::Config(
                    "runs cover different (task, seed) sets; pass --force to aggregate anyway".into(),
                )));
            }
            match format {
                Format::Csv => print!("{}", summary_csv(&summaries.iter().collect::<Vec<_>>())?),
                Format::Md => print!("{}", markdown_table(&summaries)),
            }
        }
        Command::GradCheck { weights, groups, coords, step, tolerance, seed } => {
            if groups == 0 || coords == 0 || !(step > 0.0) {
                return Err(Failure::Usage("groups, coords and step must be positive".into()));
            }
            let seed = match seed {
                Some(s) => s,
                None => default_seed()?,
            };
            let model = match weights {
                Some(p) => load_weights(&p)?.0,
                None => {
                    use rand::SeedableRng;
                    BaseWeights::init(ModelConfig::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
                }
            };
            let cfg = GradCheckConfig { groups, coords_per_group: coords, step, seed, ..Default::default() };
            let r = grad_check(&model, &cfg)?;
            println!("{} coordinates, worst relative error {:.3e}", r.coords, r.worst);
            if r.worst >= tolerance {
                return Err(Failure::Runtime(evolve::Error::Other(format!(
                    "gradient check failed: {:.3e} >= {tolerance:.1e}",
                    r.worst
                ))));
            }
        }
        Command::Replay { run, weights, index } => {
            let (model, _) = load_weights(&weights)?;
            let records: Vec<TaskRecord> = read_jsonl(&run.join("reports.jsonl"))?;
            let picked: Vec<&TaskRecord> = match index {
                Some(i) => vec![records
                    .get(i)
                    .ok_or_else(|| Failure::Usage(format!("index {i} out of range ({} records)", records.len())))?],
                None => records.iter().collect(),
            };
            let trace = run.join("trace.jsonl");
            for r in picked {
                let events = read_trace_for(&trace, &r.task_id, r.seed)?;
                replay_record(&model, r, Some(&events))?;
                println!("{} seed {}: identical ({} events)", r.task_id, r.seed, events.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

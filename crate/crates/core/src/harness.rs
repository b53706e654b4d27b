//! Experiment runner: suites × seeds × methods, with JSONL reports, CSV
//! summaries, ablation grids, and recomputation checks.
//!
//! Output layout of one run directory:
//!
//! ```text
//! reports.jsonl   one TaskRecord per (task, seed), in job order
//! trace.jsonl     every solve event, tagged with task and seed
//! timings.jsonl   wall-clock per job (kept apart so the above are reproducible)
//! summary.json    SuiteSummary
//! summary.csv     method,seed,solve_rate,mean_reward,nodes,wall_ms,fingerprint
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsl::{evaluate_text, gen_task, read_task_file, TaskInstance};
use crate::error::{Error, Result};
use crate::evolution::{
    estimate_budget, fingerprint_of, merge_walls, replay, solve, BudgetEstimate, BudgetLedger, EvolutionConfig, Meter,
    PhaseWall, SolveReport, WallClock,
};
use crate::policy::snapshot::load_weights;
use crate::policy::{BaseWeights, PromptCache, ReasoningState};
use crate::pretrain::sample_difficulty;
use crate::search::SearchTree;
use crate::trace::Event;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pot,
    SearchOnly,
    Greedy,
    BestOfN,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pot, Method::SearchOnly, Method::Greedy, Method::BestOfN];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pot => "pot",
            Method::SearchOnly => "search_only",
            Method::Greedy => "greedy",
            Method::BestOfN => "best_of_n",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

fn default_best_of_n() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub weights: PathBuf,
    /// Expected weight checksum; runs refuse to start on mismatch.
    #[serde(default)]
    pub weights_checksum: Option<String>,
    pub suite: PathBuf,
    pub method: Method,
    #[serde(default = "default_best_of_n")]
    pub best_of_n: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub evolution: EvolutionConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.weights, &mut cfg.suite, &mut cfg.out] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantics actually used for `method`: search-only never adapts, the
    /// full method always does.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        match c.method {
            Method::Pot => c.evolution.adaptation_enabled = true,
            Method::SearchOnly => c.evolution.adaptation_enabled = false,
            _ => {}
        }
        c
    }

    /// Hash of every result-affecting field (paths and worker count excluded).
    pub fn fingerprint(&self) -> String {
        let c = self.effective();
        fingerprint_of(&serde_json::json!({
            "weights_checksum": c.weights_checksum,
            "method": c.method,
            "best_of_n": c.best_of_n,
            "seeds": c.seeds,
            "evolution": c.evolution,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.method == Method::BestOfN && self.best_of_n == 0 {
            return Err(Error::Config("best_of_n must be ≥ 1".into()));
        }
        self.evolution.validate()
    }
}

/// Per-(task, seed) solve seed shared by every method, so arms are paired.
pub fn job_seed(seed: u64, task_fingerprint: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{task_fingerprint}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub method: Method,
    pub seed: u64,
    pub task_id: String,
    pub task_fingerprint: String,
    pub fingerprint: String,
    pub solved: bool,
    pub reward: f64,
    pub program: String,
    pub nodes: usize,
    pub ledger: BudgetLedger,
    /// Full solve report for the search methods (replayable).
    pub report: Option<SolveReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub method: Method,
    pub seed: u64,
    pub task_id: String,
    pub wall: WallClock,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    task_id: &'a str,
    seed: u64,
    #[serde(flatten)]
    event: &'a Event,
}

pub struct JobResult {
    pub record: TaskRecord,
    pub timing: TaskTiming,
    pub events: Vec<Event>,
    /// The search tree, for the search methods.
    pub tree: Option<SearchTree>,
}

fn greedy_job(model: &BaseWeights, task: &TaskInstance, cfg: &ExperimentConfig) -> Result<(String, f64, Meter)> {
    let mut meter = Meter::default();
    let t0 = Instant::now();
    let state = ReasoningState::new(task.clone());
    let mnt = cfg.evolution.search.max_new_tokens;
    let cache = PromptCache::for_state(model, None, &state, mnt)?;
    meter.forward_prompt(cache.prompt.len(), t0.elapsed());
    let t0 = Instant::now();
    let th = cache.greedy(mnt)?;
    meter.generated(th.tokens.len(), t0.elapsed());
    let r = evaluate_text(&th.text, task).reward;
    Ok((th.text, r, meter))
}

fn best_of_n_job(
    model: &BaseWeights,
    task: &TaskInstance,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(String, f64, Meter)> {
    let mut meter = Meter::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = ReasoningState::new(task.clone());
    let s = &cfg.evolution.search;
    let t0 = Instant::now();
    let cache = PromptCache::for_state(model, None, &state, s.max_new_tokens)?;
    meter.forward_prompt(cache.prompt.len(), t0.elapsed());
    let (mut best_r, mut best) = (-1.0, String::new());
    for _ in 0..cfg.best_of_n {
        let t0 = Instant::now();
        let th = cache.sample(s.temperature, s.max_new_tokens, &mut rng)?;
        meter.generated(th.tokens.len(), t0.elapsed());
        let r = evaluate_text(&th.text, task).reward;
        if r > best_r {
            best_r = r;
            best = th.text;
        }
        if r == 1.0 {
            break;
        }
    }
    Ok((best, best_r.max(0.0), meter))
}

/// Runs one method on one (task, seed) pair.
pub fn run_job(model: &BaseWeights, task: &TaskInstance, seed: u64, cfg: &ExperimentConfig) -> Result<JobResult> {
    let fingerprint = cfg.fingerprint();
    let s = job_seed(seed, &task.fingerprint());
    let started = Instant::now();
    let (program, reward, ledger, report, events, mut wall, tree) = match cfg.method {
        Method::Pot | Method::SearchOnly => {
            let out = solve(model, task, &cfg.effective().evolution, s)?;
            (
                out.report.final_program.clone(),
                out.report.reward,
                out.report.ledger.clone(),
                Some(out.report),
                out.trace.events,
                out.wall,
                Some(out.tree),
            )
        }
        Method::Greedy | Method::BestOfN => {
            let (text, r, meter) = if cfg.method == Method::Greedy {
                greedy_job(model, task, cfg)?
            } else {
                best_of_n_job(model, task, cfg, s)?
            };
            let mut wall = meter.wall;
            wall.phases = vec![PhaseWall {
                forward_ns: wall.forward_ns,
                backward_ns: 0,
            }];
            (text, r, meter.ledger, None, Vec::new(), wall, None)
        }
    };
    wall.total_ns = started.elapsed().as_nanos() as u64;
    Ok(JobResult {
        record: TaskRecord {
            method: cfg.method,
            seed,
            task_id: task.task_id.clone(),
            task_fingerprint: task.fingerprint(),
            fingerprint,
            solved: reward == 1.0,
            reward,
            program,
            nodes: ledger.nodes_generated,
            ledger,
            report,
        },
        timing: TaskTiming {
            method: cfg.method,
            seed,
            task_id: task.task_id.clone(),
            wall,
        },
        events,
        tree,
    })
}

pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Runs every (seed, task) job on a worker pool and hands results to `sink`
/// strictly in job order (seed-major), so streamed output is deterministic
/// and an interrupted run leaves a valid prefix.
pub fn run_jobs(
    model: &BaseWeights,
    tasks: &[TaskInstance],
    cfg: &ExperimentConfig,
    mut sink: impl FnMut(JobResult) -> Result<()>,
) -> Result<()> {
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..tasks.len()).map(move |t| (s, t)))
        .collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count(cfg.workers).min(jobs.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Result<JobResult>)>();
    let failed = Mutex::new(false);
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, failed) = (&jobs, &next, &failed);
            scope.spawn(move || loop {
                if *failed.lock().unwrap() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (seed, t) = jobs[i];
                let r = run_job(model, &tasks[t], seed, cfg);
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, JobResult> = BTreeMap::new();
        let mut emitted = 0;
        for (i, r) in rx {
            match r {
                Ok(res) => {
                    pending.insert(i, res);
                }
                Err(e) => {
                    *failed.lock().unwrap() = true;
                    return Err(e);
                }
            }
            while let Some(res) = pending.remove(&emitted) {
                if let Err(e) = sink(res) {
                    *failed.lock().unwrap() = true;
                    return Err(e);
                }
                emitted += 1;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub solve_rate: f64,
    pub mean_reward: f64,
    pub mean_nodes: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub method: Method,
    pub fingerprint: String,
    pub n_tasks: usize,
    pub solve_rate: f64,
    pub mean_reward: f64,
    pub mean_nodes: f64,
    pub mean_wall_ms: f64,
    /// Mean wall time per search phase (per candidate for the baselines).
    pub mean_phase_cost_ms: f64,
    /// Mean token positions processed per phase (forward plus backward).
    pub mean_phase_positions: f64,
    /// Mean post-update token KL against the reference, over all updates.
    pub mean_post_kl: Option<f64>,
    pub per_seed: Vec<SeedSummary>,
    pub budget: Option<BudgetEstimate>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Pure function of the per-task records and timings.
pub fn summarize(records: &[TaskRecord], timings: &[TaskTiming], post_kls: &[f64]) -> Result<SuiteSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("no task records to summarize".into()))?;
    if records.len() != timings.len() {
        return Err(Error::Config(format!(
            "{} records but {} timings",
            records.len(),
            timings.len()
        )));
    }
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let per_seed = seeds
        .iter()
        .map(|&s| {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].seed == s).collect();
            SeedSummary {
                seed: s,
                solve_rate: mean(idx.iter().map(|&i| records[i].solved as u8 as f64)),
                mean_reward: mean(idx.iter().map(|&i| records[i].reward)),
                mean_nodes: mean(idx.iter().map(|&i| records[i].nodes as f64)),
                wall_ms: mean(idx.iter().map(|&i| timings[i].wall.total_ns as f64 / 1e6)),
            }
        })
        .collect::<Vec<_>>();
    let n_phases: usize = records.iter().map(|r| r.ledger.phases.len().max(1)).sum();
    let wall_phase_ns: u64 = timings.iter().map(|t| t.wall.forward_ns + t.wall.backward_ns).sum();
    let positions: u64 = records
        .iter()
        .map(|r| r.ledger.forward_positions + r.ledger.backward_positions)
        .sum();
    let searchy = matches!(first.method, Method::Pot | Method::SearchOnly);
    let budget = if searchy {
        estimate_budget(&merge_walls(timings.iter().map(|t| &t.wall))).ok()
    } else {
        None
    };
    let per_unit = if searchy {
        n_phases
    } else {
        records.iter().map(|r| r.nodes.max(1)).sum()
    };
    Ok(SuiteSummary {
        method: first.method,
        fingerprint: first.fingerprint.clone(),
        n_tasks: records.iter().map(|r| &r.task_fingerprint).collect::<BTreeSet<_>>().len(),
        solve_rate: mean(per_seed.iter().map(|s| s.solve_rate)),
        mean_reward: mean(per_seed.iter().map(|s| s.mean_reward)),
        mean_nodes: mean(records.iter().map(|r| r.nodes as f64)),
        mean_wall_ms: mean(timings.iter().map(|t| t.wall.total_ns as f64 / 1e6)),
        mean_phase_cost_ms: wall_phase_ns as f64 / 1e6 / per_unit as f64,
        mean_phase_positions: positions as f64 / per_unit as f64,
        mean_post_kl: (!post_kls.is_empty()).then(|| mean(post_kls.iter().copied())),
        per_seed,
        budget,
    })
}

pub const CSV_HEADER: [&str; 7] = ["method", "seed", "solve_rate", "mean_reward", "nodes", "wall_ms", "fingerprint"];

pub fn summary_csv(summaries: &[&SuiteSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Other(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for s in summaries {
        for p in &s.per_seed {
            w.write_record([
                s.method.name().to_string(),
                p.seed.to_string(),
                format!("{:.6}", p.solve_rate),
                format!("{:.6}", p.mean_reward),
                format!("{:.3}", p.mean_nodes),
                format!("{:.3}", p.wall_ms),
                s.fingerprint.clone(),
            ])
            .map_err(err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Other(format!("csv: {e}")))?)
        .map_err(|e| Error::Other(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut impl Write, path: &Path, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn post_kls(events: &[Event]) -> impl Iterator<Item = f64> + '_ {
    events.iter().filter_map(|e| match e {
        Event::Update { post_kl_ref, .. } => Some(*post_kl_ref),
        _ => None,
    })
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<BaseWeights> {
    let (model, header) = load_weights(&cfg.weights)?;
    if let Some(want) = &cfg.weights_checksum {
        if *want != header.checksum {
            return Err(Error::Checksum {
                expected: want.clone(),
                found: header.checksum,
            });
        }
    }
    Ok(model)
}

/// Runs one configured method and writes the run directory `out`.
pub fn run_suite(model: &BaseWeights, tasks: &[TaskInstance], cfg: &ExperimentConfig, out: &Path) -> Result<SuiteSummary> {
    run_suite_inspect(model, tasks, cfg, out, |_| Ok(()))
}

/// [`run_suite`] that also shows every job result, in job order, to `inspect`
/// before it is written.
pub fn run_suite_inspect(
    model: &BaseWeights,
    tasks: &[TaskInstance],
    cfg: &ExperimentConfig,
    out: &Path,
    mut inspect: impl FnMut(&JobResult) -> Result<()>,
) -> Result<SuiteSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (rp, tp, mp) = (out.join("reports.jsonl"), out.join("trace.jsonl"), out.join("timings.jsonl"));
    let (mut rw, mut tw, mut mw) = (create(&rp)?, create(&tp)?, create(&mp)?);
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut kls = Vec::new();
    run_jobs(model, tasks, cfg, |res| {
        inspect(&res)?;
        write_line(&mut rw, &rp, &res.record)?;
        for e in &res.events {
            write_line(&mut tw, &tp, &TraceLine { task_id: &res.record.task_id, seed: res.record.seed, event: e })?;
        }
        write_line(&mut mw, &mp, &res.timing)?;
        kls.extend(post_kls(&res.events));
        records.push(res.record);
        timings.push(res.timing);
        Ok(())
    })?;
    let summary = summarize(&records, &timings, &kls)?;
    write_summary(out, &summary)?;
    Ok(summary)
}

fn write_summary(out: &Path, summary: &SuiteSummary) -> Result<()> {
    let sp = out.join("summary.json");
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::json(&sp, e))?;
    std::fs::write(&sp, text + "\n").map_err(|e| Error::io(&sp, e))?;
    let cp = out.join("summary.csv");
    std::fs::write(&cp, summary_csv(&[summary])?).map_err(|e| Error::io(&cp, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

/// Post-update KL values recorded in a run's trace file.
pub fn read_post_kls(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.contains("\"event\":\"update\"") {
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            if let Some(k) = v.get("post_kl_ref").and_then(|k| k.as_f64()) {
                out.push(k);
            }
        }
    }
    Ok(out)
}

/// Recomputes a run directory's summary from its raw files and checks it
/// against the stored one.
pub fn verify_run(dir: &Path) -> Result<SuiteSummary> {
    let records: Vec<TaskRecord> = read_jsonl(&dir.join("reports.jsonl"))?;
    let timings: Vec<TaskTiming> = read_jsonl(&dir.join("timings.jsonl"))?;
    let kls = read_post_kls(&dir.join("trace.jsonl"))?;
    let sp = dir.join("summary.json");
    let stored: SuiteSummary =
        serde_json::from_str(&std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?)
            .map_err(|e| Error::json(&sp, e))?;
    if let Some(r) = records.iter().find(|r| r.fingerprint != stored.fingerprint) {
        return Err(Error::Config(format!(
            "record {}/{} has fingerprint {} but the summary has {}",
            r.task_id, r.seed, r.fingerprint, stored.fingerprint
        )));
    }
    let again = summarize(&records, &timings, &kls)?;
    if again != stored {
        return Err(Error::Config(format!(
            "{}: recomputed summary differs from the stored one",
            dir.display()
        )));
    }
    Ok(again)
}

/// One ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Grid {
    K(Vec<usize>),
    RankLr(Vec<(usize, f64)>),
    Beta(Vec<f64>),
}

impl Grid {
    /// `k=1,2,3` | `beta=0.002,0.02,0.2` | `r:lr=4:1e-3,8:1e-3`.
    pub fn parse(spec: &str) -> Result<Grid> {
        let bad = || Error::Config(format!("malformed grid {spec:?}"));
        let (axis, values) = spec.split_once('=').ok_or_else(bad)?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config("empty grid".into()));
        }
        Ok(match axis.trim() {
            "k" => Grid::K(items.iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?),
            "beta" => Grid::Beta(items.iter().map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?),
            "r:lr" => Grid::RankLr(
                items
                    .iter()
                    .map(|v| {
                        let (r, lr) = v.split_once(':').ok_or_else(bad)?;
                        Ok((r.parse().map_err(|_| bad())?, lr.parse().map_err(|_| bad())?))
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(bad()),
        })
    }

    pub fn cells(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let mut out = Vec::new();
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Grid::K(ks) => {
                for &k in ks {
                    out.push((format!("k={k}"), with(&|c| c.evolution.search.k = k)));
                }
            }
            Grid::Beta(bs) => {
                for &b in bs {
                    out.push((format!("beta={b}"), with(&|c| c.evolution.grpo.beta = b)));
                }
            }
            Grid::RankLr(v) => {
                for &(r, lr) in v {
                    out.push((
                        format!("r={r},lr={lr}"),
                        with(&|c| {
                            c.evolution.rank = r;
                            c.evolution.adam.lr = lr;
                        }),
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell: String,
    pub summary: SuiteSummary,
}

/// One run directory per cell under `out`, plus `grid.json` / `grid.csv`.
pub fn run_ablation(model: &BaseWeights, tasks: &[TaskInstance], base: &ExperimentConfig, grid: &Grid, out: &Path) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (name, cfg) in grid.cells(base) {
        let dir = out.join(name.replace([',', '='], "_"));
        let summary = run_suite(model, tasks, &cfg, &dir)?;
        cells.push(GridCell { cell: name, summary });
    }
    let gp = out.join("grid.json");
    std::fs::write(&gp, serde_json::to_string_pretty(&cells).map_err(|e| Error::json(&gp, e))? + "\n")
        .map_err(|e| Error::io(&gp, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Other(format!("csv: {e}"));
    w.write_record(["cell", "solve_rate", "mean_reward", "mean_nodes", "mean_phase_cost_ms", "mean_phase_positions", "mean_post_kl"])
        .map_err(err)?;
    for c in &cells {
        let s = &c.summary;
        w.write_record([
            c.cell.clone(),
            format!("{:.6}", s.solve_rate),
            format!("{:.6}", s.mean_reward),
            format!("{:.3}", s.mean_nodes),
            format!("{:.3}", s.mean_phase_cost_ms),
            format!("{:.1}", s.mean_phase_positions),
            s.mean_post_kl.map_or(String::new(), |k| format!("{k:.6e}")),
        ])
        .map_err(err)?;
    }
    let cp = out.join("grid.csv");
    let bytes = w.into_inner().map_err(|e| Error::Other(format!("csv: {e}")))?;
    std::fs::write(&cp, bytes).map_err(|e| Error::io(&cp, e))?;
    Ok(cells)
}

/// Markdown comparison table over run summaries.
pub fn markdown_table(summaries: &[SuiteSummary]) -> String {
    let mut s = String::from("| method | solve rate | mean reward | mean nodes | phase cost (ms) | wall (ms) |\n|---|---|---|---|---|---|\n");
    for m in summaries {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.2} | {:.2} | {:.1} |\n",
            m.method.name(),
            m.solve_rate,
            m.mean_reward,
            m.mean_nodes,
            m.mean_phase_cost_ms,
            m.mean_wall_ms
        ));
    }
    s
}

pub fn load_suite(path: &Path) -> Result<Vec<TaskInstance>> {
    let tasks = read_task_file(path)?;
    if tasks.is_empty() {
        return Err(Error::Config(format!("{} holds no tasks", path.display())));
    }
    Ok(tasks)
}

/// Parses a difficulty mix such as `2:1,3:1,4:1` (difficulty:weight).
pub fn parse_mix(spec: &str) -> Result<Vec<(u8, f64)>> {
    let bad = |why: &str| Error::Config(format!("difficulty mix {spec:?}: {why}"));
    let mut mix = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (d, w) = item.split_once(':').ok_or_else(|| bad("expected difficulty:weight"))?;
        let d: u8 = d.trim().parse().map_err(|_| bad("difficulty is not an integer"))?;
        let w: f64 = w.trim().parse().map_err(|_| bad("weight is not a number"))?;
        if !(1..=4).contains(&d) {
            return Err(bad("difficulty must be in 1..=4"));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(bad("weights must be finite and non-negative"));
        }
        if mix.iter().any(|m: &(u8, f64)| m.0 == d) {
            return Err(bad("difficulty listed twice"));
        }
        mix.push((d, w));
    }
    if mix.iter().map(|m| m.1).sum::<f64>() <= 0.0 {
        return Err(bad("weights sum to zero"));
    }
    Ok(mix)
}

/// `n` evaluation tasks with difficulties drawn from `mix`. Task seeds stay
/// below the training range, so suites never overlap the pretraining corpus.
pub fn gen_suite(n: usize, mix: &[(u8, f64)], seed: u64) -> Result<Vec<TaskInstance>> {
    if n == 0 || n as u64 >= 1 << 31 {
        return Err(Error::Config(format!("suite size {n} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = seed.wrapping_mul(100_003) % (1 << 31);
    (0..n)
        .map(|i| gen_task(base + i as u64, sample_difficulty(mix, &mut rng)))
        .collect()
}

/// The stored events of one (task, seed) solve.
pub fn read_trace_for(path: &Path, task_id: &str, seed: u64) -> Result<Vec<Event>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let obj = v.as_object_mut().ok_or_else(|| Error::Other(format!("{}: not an object", path.display())))?;
        if obj.get("task_id").and_then(|t| t.as_str()) != Some(task_id) || obj.get("seed").and_then(|s| s.as_u64()) != Some(seed) {
            continue;
        }
        obj.remove("task_id");
        obj.remove("seed");
        out.push(serde_json::from_value(v).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

/// Re-runs a stored search record and checks trace and report byte equality.
pub fn replay_record(model: &BaseWeights, record: &TaskRecord, stored: Option<&[Event]>) -> Result<SolveReport> {
    let report = record
        .report
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} records carry no solve report", record.method.name())))?;
    Ok(replay(model, report, stored)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            weights: "w.bin".into(),
            weights_checksum: None,
            suite: "s.jsonl".into(),
            method: Method::Pot,
            best_of_n: 20,
            seeds: vec![1, 2],
            out: "out".into(),
            workers: 0,
            evolution: EvolutionConfig::default(),
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = cfg();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml("weights = 3").is_err());
    }

    #[test]
    fn fingerprint_ignores_paths_but_not_semantics() {
        let a = cfg();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.workers = 7;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seeds.push(3);
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.method = Method::SearchOnly;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("2:1, 3:1,4:2").unwrap(), vec![(2, 1.0), (3, 1.0), (4, 2.0)]);
        for bad in ["", "2", "5:1", "2:-1", "2:x", "2:0", "2:1,2:1"] {
            assert!(parse_mix(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn suites_are_seeded_and_held_out() {
        let mix = parse_mix("2:1,3:1,4:1").unwrap();
        let a = gen_suite(30, &mix, 4).unwrap();
        assert_eq!(a, gen_suite(30, &mix, 4).unwrap());
        assert_ne!(a, gen_suite(30, &mix, 5).unwrap());
        assert!(a.iter().all(|t| (2..=4).contains(&t.difficulty)));
        let ids: BTreeSet<_> = a.iter().map(|t| t.task_id.clone()).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(Grid::parse("k=1,3").unwrap(), Grid::K(vec![1, 3]));
        assert_eq!(Grid::parse("r:lr=4:1e-3").unwrap(), Grid::RankLr(vec![(4, 1e-3)]));
        assert!(Grid::parse("k=").is_err());
        assert!(Grid::parse("q=1").is_err());
        assert_eq!(Grid::parse("beta=0.002,0.02,0.2").unwrap().cells(&cfg()).len(), 3);
    }
}

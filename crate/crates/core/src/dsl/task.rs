//! Synthetic task instances: a hidden program plus input/output unit tests
//! produced by running it.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::exec::{execute, DEFAULT_STEP_CAP};
use super::program::{Op, Program};
use crate::error::{Error, Result};

pub const TESTS_PER_TASK: usize = 5;
pub const MAX_ATTEMPTS: usize = 100;
/// Expected outputs are kept small so test serializations stay short.
pub const MAX_OUTPUT_MAGNITUDE: i64 = 999;
pub const INPUT_RANGE: std::ops::RangeInclusive<i64> = -9..=9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: Vec<i64>,
    pub expected: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub difficulty: u8,
    pub tests: Vec<TestCase>,
    /// Known only to the generator; never serialized into task files.
    #[serde(skip)]
    pub hidden_solution: Option<Program>,
}

impl TaskInstance {
    /// Content hash over the public part of the task.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task_id.as_bytes());
        h.update([self.difficulty]);
        for t in &self.tests {
            h.update(b"|");
            for v in &t.input {
                h.update(v.to_le_bytes());
            }
            h.update(b">");
            h.update(t.expected.to_le_bytes());
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn input_arity(&self) -> usize {
        self.tests.first().map_or(0, |t| t.input.len())
    }
}

/// Maximum hidden-solution length for a difficulty level.
pub fn max_solution_len(difficulty: u8) -> usize {
    2 * difficulty as usize + 2
}

/// Deterministically samples a task. Retries (bounded) until the hidden
/// program runs cleanly on every test, keeps outputs small, and is not
/// degenerate (constant output, or output equal to the untouched input top).
pub fn gen_task(seed: u64, difficulty: u8) -> Result<TaskInstance> {
    if !(1..=4).contains(&difficulty) {
        return Err(Error::Config(format!("difficulty {difficulty} not in 1..=4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ difficulty as u64);
    for _ in 0..MAX_ATTEMPTS {
        let arity = rng.gen_range(1..=2usize);
        let program = sample_program(&mut rng, difficulty, arity);
        let inputs = sample_inputs(&mut rng, arity);
        if let Some(tests) = run_tests(&program, &inputs) {
            return Ok(TaskInstance {
                task_id: format!("d{difficulty}-{seed}"),
                difficulty,
                tests,
                hidden_solution: Some(program),
            });
        }
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
        difficulty,
    })
}

fn run_tests(program: &Program, inputs: &[Vec<i64>]) -> Option<Vec<TestCase>> {
    let mut tests = Vec::with_capacity(inputs.len());
    for input in inputs {
        let out = execute(program, input, DEFAULT_STEP_CAP).ok()?;
        if out.abs() > MAX_OUTPUT_MAGNITUDE {
            return None;
        }
        tests.push(TestCase {
            input: input.clone(),
            expected: out,
        });
    }
    let first = tests[0].expected;
    if tests.iter().all(|t| t.expected == first) {
        return None;
    }
    if tests.iter().all(|t| Some(&t.expected) == t.input.last()) {
        return None;
    }
    Some(tests)
}

fn sample_inputs(rng: &mut ChaCha8Rng, arity: usize) -> Vec<Vec<i64>> {
    let mut seen = BTreeSet::new();
    while seen.len() < TESTS_PER_TASK {
        let input: Vec<i64> = (0..arity).map(|_| rng.gen_range(INPUT_RANGE)).collect();
        seen.insert(input);
    }
    let mut inputs: Vec<_> = seen.into_iter().collect();
    inputs.shuffle(rng);
    inputs
}

fn sample_program(rng: &mut ChaCha8Rng, difficulty: u8, arity: usize) -> Program {
    let max_len = max_solution_len(difficulty);
    let min_len = difficulty as usize;
    let len = rng.gen_range(min_len..=max_len);
    let mut ops = Vec::with_capacity(len);
    let mut depth = arity as i64;
    let allow_loop = difficulty >= 3;
    while ops.len() < len {
        let remaining = len - ops.len();
        if allow_loop && remaining >= 3 && rng.gen_bool(0.25) {
            let body_len = rng.gen_range(1..=(remaining - 2).min(3));
            ops.push(Op::Repeat(rng.gen_range(2..=4)));
            for _ in 0..body_len {
                ops.push(sample_op(rng, depth));
            }
            ops.push(Op::End);
            // the loop body may change depth per iteration; stay conservative
            depth = depth.max(1);
            continue;
        }
        let op = sample_op(rng, depth);
        depth += stack_effect(op);
        ops.push(op);
    }
    Program::new(ops).expect("generator emits structurally valid programs")
}

fn sample_op(rng: &mut ChaCha8Rng, depth: i64) -> Op {
    let mut choices: Vec<(Op, u32)> = vec![(Op::Push(rng.gen_range(1..=9)), 3), (Op::Dup, 2)];
    if depth >= 2 {
        choices.extend([
            (Op::Add, 3),
            (Op::Sub, 3),
            (Op::Mul, 3),
            (Op::Swap, 1),
            (Op::Over, 2),
            (Op::Drop, 1),
        ]);
    }
    if depth < 1 {
        return Op::Push(rng.gen_range(1..=9));
    }
    let total: u32 = choices.iter().map(|c| c.1).sum();
    let mut pick = rng.gen_range(0..total);
    for (op, w) in choices {
        if pick < w {
            return op;
        }
        pick -= w;
    }
    unreachable!()
}

fn stack_effect(op: Op) -> i64 {
    match op {
        Op::Push(_) | Op::Dup | Op::Over => 1,
        Op::Add | Op::Sub | Op::Mul | Op::Drop => -1,
        Op::Swap | Op::Repeat(_) | Op::End => 0,
    }
}

/// Writes a task file (one public task per line) and a separate manifest of
/// hidden solutions.
pub fn write_task_files(tasks: &[TaskInstance], tasks_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut manifest = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::json(tasks_path, e))?);
        out.push('\n');
        let entry = SolutionEntry {
            task_id: t.task_id.clone(),
            solution: t.hidden_solution.clone(),
        };
        manifest.push_str(&serde_json::to_string(&entry).map_err(|e| Error::json(manifest_path, e))?);
        manifest.push('\n');
    }
    write_all(tasks_path, out.as_bytes())?;
    write_all(manifest_path, manifest.as_bytes())
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionEntry {
    pub task_id: String,
    pub solution: Option<Program>,
}

pub fn read_task_file(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(tasks)
}

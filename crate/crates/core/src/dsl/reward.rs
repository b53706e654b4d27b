use serde::{Deserialize, Serialize};

use super::exec::{execute, Fault, DEFAULT_STEP_CAP};
use super::program::{parse_program, Program};
use super::task::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub n_pass: usize,
    pub n_total: usize,
    pub reward: f64,
    pub per_test: Vec<TestOutcome>,
    pub fault: Option<Fault>,
}

impl RewardReport {
    pub fn solved(&self) -> bool {
        self.reward == 1.0
    }

    fn parse_failure(n_total: usize) -> Self {
        RewardReport {
            n_pass: 0,
            n_total,
            reward: 0.0,
            per_test: vec![TestOutcome::Error; n_total],
            fault: Some(Fault::Parse),
        }
    }
}

/// The unit-test reward: 1 when every test passes, the pass fraction when
/// some pass, 0 otherwise. An empty test list counts as all passing.
pub fn reward_value(n_pass: usize, n_total: usize) -> f64 {
    if n_pass == n_total {
        1.0
    } else if n_pass > 0 {
        n_pass as f64 / n_total as f64
    } else {
        0.0
    }
}

/// Runs every test of `task`. A runtime fault fails only the test it occurs
/// in; the first fault seen is recorded in the report.
pub fn evaluate(program: &Program, task: &TaskInstance) -> RewardReport {
    let mut per_test = Vec::with_capacity(task.tests.len());
    let mut fault = None;
    let mut n_pass = 0;
    for test in &task.tests {
        let outcome = match execute(program, &test.input, DEFAULT_STEP_CAP) {
            Ok(top) if top == test.expected => {
                n_pass += 1;
                TestOutcome::Pass
            }
            Ok(_) => TestOutcome::Fail,
            Err(f) => {
                fault.get_or_insert(f);
                TestOutcome::Error
            }
        };
        per_test.push(outcome);
    }
    let n_total = task.tests.len();
    RewardReport {
        n_pass,
        n_total,
        reward: reward_value(n_pass, n_total),
        per_test,
        fault,
    }
}

/// Like [`evaluate`] but starting from source text; unparseable text earns 0.
pub fn evaluate_text(text: &str, task: &TaskInstance) -> RewardReport {
    match parse_program(text) {
        Ok(p) => evaluate(&p, task),
        Err(_) => RewardReport::parse_failure(task.tests.len()),
    }
}

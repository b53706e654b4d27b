//! The stack-machine environment: program syntax, the interpreter, the
//! unit-test reward, and the synthetic task generator.

mod enumerate;
mod exec;
mod program;
mod reward;
mod task;

pub use enumerate::{shortest_equivalent, straight_line_ops};
pub use exec::{execute, Fault, DEFAULT_STEP_CAP};
pub use program::{
    parse_program, Op, ParseError, Program, MAX_IMMEDIATE, MAX_INSTRUCTIONS, MAX_NESTING, MAX_REPEAT,
};
pub use reward::{evaluate, evaluate_text, reward_value, RewardReport, TestOutcome};
pub use task::{
    gen_task, max_solution_len, read_task_file, write_task_files, SolutionEntry, TaskInstance,
    TestCase, TESTS_PER_TASK,
};

//! Brute-force search for the shortest straight-line program that passes a
//! task's tests.

use super::program::{Op, Program};
use super::task::TaskInstance;

/// Candidate instructions in preference order (earlier wins among programs
/// of equal length).
pub fn straight_line_ops() -> Vec<Op> {
    let mut ops = vec![Op::Add, Op::Sub, Op::Mul, Op::Dup, Op::Swap, Op::Drop, Op::Over];
    ops.extend((1..=9).map(Op::Push));
    ops
}

fn step(op: Op, stack: &mut Vec<i64>) -> bool {
    let n = stack.len();
    match op {
        Op::Push(v) => stack.push(v),
        Op::Dup if n >= 1 => stack.push(stack[n - 1]),
        Op::Over if n >= 2 => stack.push(stack[n - 2]),
        Op::Swap if n >= 2 => stack.swap(n - 1, n - 2),
        Op::Drop if n >= 1 => {
            stack.pop();
        }
        Op::Add | Op::Sub | Op::Mul if n >= 2 => {
            let b = stack.pop().unwrap();
            let a = stack.pop().unwrap();
            stack.push(match op {
                Op::Add => a.wrapping_add(b),
                Op::Sub => a.wrapping_sub(b),
                _ => a.wrapping_mul(b),
            });
        }
        _ => return false,
    }
    true
}

fn search(stacks: &[Vec<i64>], expected: &[i64], ops: &[Op], depth: usize, prefix: &mut Vec<Op>) -> bool {
    if depth == 0 {
        return stacks.iter().zip(expected).all(|(s, e)| s.last() == Some(e));
    }
    for &op in ops {
        let mut next = stacks.to_vec();
        if next.iter_mut().all(|s| step(op, s)) {
            prefix.push(op);
            if search(&next, expected, ops, depth - 1, prefix) {
                return true;
            }
            prefix.pop();
        }
    }
    false
}

/// Shortest program of at most `max_len` instructions (no loops) that passes
/// every test of `task`; ties go to the earliest in [`straight_line_ops`]
/// order. `None` if no such program exists within the bound.
pub fn shortest_equivalent(task: &TaskInstance, max_len: usize) -> Option<Program> {
    let stacks: Vec<Vec<i64>> = task.tests.iter().map(|t| t.input.clone()).collect();
    let expected: Vec<i64> = task.tests.iter().map(|t| t.expected).collect();
    let ops = straight_line_ops();
    let mut prefix = Vec::new();
    (0..=max_len)
        .find(|&len| search(&stacks, &expected, &ops, len, &mut prefix))
        .map(|_| Program::new(prefix).expect("straight-line programs are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{evaluate, gen_task, TestCase};

    #[test]
    fn finds_the_single_instruction() {
        let task = TaskInstance {
            task_id: "t".into(),
            difficulty: 1,
            tests: [(3, 4), (-2, 5), (0, 7)]
                .iter()
                .map(|&(a, b)| TestCase { input: vec![a, b], expected: a * b })
                .collect(),
            hidden_solution: None,
        };
        assert_eq!(shortest_equivalent(&task, 3).unwrap().render(), "MUL");
    }

    #[test]
    fn results_solve_and_never_exceed_the_generator() {
        for seed in 0..100 {
            let task = gen_task(seed, 1).unwrap();
            let gold = task.hidden_solution.clone().unwrap();
            let found = shortest_equivalent(&task, gold.len()).expect("gold itself is within the bound");
            assert!(found.len() <= gold.len());
            assert!(evaluate(&found, &task).solved());
        }
    }
}

//! Deterministic interpreter. Arithmetic wraps at 64 bits; loops are
//! statically bounded, so the only way to run long is a large step budget.

use serde::{Deserialize, Serialize};

use super::program::{Op, Program};

pub const DEFAULT_STEP_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Parse,
    StackUnderflow,
    EmptyAtHalt,
    StepCap,
}

/// Runs `program` on `input` (last element is the top) and returns the top of
/// the stack at halt.
///
/// Every executed instruction costs one step, including each pass through a
/// loop body and the REPEAT/END markers themselves.
pub fn execute(program: &Program, input: &[i64], step_cap: usize) -> Result<i64, Fault> {
    let ops = program.ops();
    let jumps = match_ends(ops);
    let mut stack: Vec<i64> = input.to_vec();
    // (index of REPEAT, iterations still to run after the current one)
    let mut loops: Vec<(usize, u8)> = Vec::with_capacity(2);
    let mut steps = 0usize;
    let mut pc = 0usize;

    while pc < ops.len() {
        steps += 1;
        if steps > step_cap {
            return Err(Fault::StepCap);
        }
        match ops[pc] {
            Op::Push(n) => stack.push(n),
            Op::Add => binary(&mut stack, i64::wrapping_add)?,
            Op::Sub => binary(&mut stack, i64::wrapping_sub)?,
            Op::Mul => binary(&mut stack, i64::wrapping_mul)?,
            Op::Dup => {
                let top = *stack.last().ok_or(Fault::StackUnderflow)?;
                stack.push(top);
            }
            Op::Swap => {
                let n = stack.len();
                if n < 2 {
                    return Err(Fault::StackUnderflow);
                }
                stack.swap(n - 1, n - 2);
            }
            Op::Drop => {
                stack.pop().ok_or(Fault::StackUnderflow)?;
            }
            Op::Over => {
                let n = stack.len();
                if n < 2 {
                    return Err(Fault::StackUnderflow);
                }
                stack.push(stack[n - 2]);
            }
            Op::Repeat(k) => {
                if k == 0 {
                    pc = jumps[pc];
                } else {
                    loops.push((pc, k - 1));
                }
            }
            Op::End => {
                let (start, left) = loops
                    .last_mut()
                    .expect("validated program has balanced loops");
                if *left > 0 {
                    *left -= 1;
                    pc = *start;
                } else {
                    loops.pop();
                }
            }
        }
        pc += 1;
    }
    stack.last().copied().ok_or(Fault::EmptyAtHalt)
}

fn binary(stack: &mut Vec<i64>, f: fn(i64, i64) -> i64) -> Result<(), Fault> {
    let b = stack.pop().ok_or(Fault::StackUnderflow)?;
    let a = stack.pop().ok_or(Fault::StackUnderflow)?;
    stack.push(f(a, b));
    Ok(())
}

fn match_ends(ops: &[Op]) -> Vec<usize> {
    let mut jumps = vec![0; ops.len()];
    let mut open = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Repeat(_) => open.push(i),
            Op::End => {
                let start = open.pop().expect("validated program has balanced loops");
                jumps[start] = i;
            }
            _ => {}
        }
    }
    jumps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_program;

    fn run(src: &str, input: &[i64]) -> Result<i64, Fault> {
        execute(&parse_program(src).unwrap(), input, DEFAULT_STEP_CAP)
    }

    #[test]
    fn forced_arithmetic() {
        assert_eq!(run("PUSH 2 PUSH 3 ADD", &[]), Ok(5));
        assert_eq!(run("SUB", &[10, 3]), Ok(7));
        assert_eq!(run("OVER OVER MUL SWAP DROP", &[4, 6]), Ok(24));
    }

    #[test]
    fn faults() {
        assert_eq!(run("DUP", &[]), Err(Fault::StackUnderflow));
        assert_eq!(run("ADD", &[1]), Err(Fault::StackUnderflow));
        assert_eq!(run("DROP", &[1]), Err(Fault::EmptyAtHalt));
        assert_eq!(run("", &[]), Err(Fault::EmptyAtHalt));
        let p = parse_program("REPEAT 8 REPEAT 8 DUP DROP END END").unwrap();
        assert_eq!(execute(&p, &[1], 50), Err(Fault::StepCap));
        assert_eq!(execute(&p, &[1], DEFAULT_STEP_CAP), Ok(1));
    }

    #[test]
    fn wrapping_multiplication() {
        let src = "REPEAT 8 DUP MUL END";
        assert_eq!(run(src, &[3]), Ok(3i64.wrapping_pow(256)));
    }

    #[test]
    fn zero_iteration_loop_is_skipped() {
        assert_eq!(run("REPEAT 0 DROP DROP END PUSH 1 ADD", &[4]), Ok(5));
    }
}

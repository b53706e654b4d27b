//! Program representation for the stack DSL, with a whitespace-token parser
//! and a canonical renderer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_INSTRUCTIONS: usize = 64;
pub const MAX_IMMEDIATE: i64 = 99;
pub const MAX_REPEAT: u8 = 8;
pub const MAX_NESTING: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Push(i64),
    Add,
    Sub,
    Mul,
    Dup,
    Swap,
    Drop,
    Over,
    Repeat(u8),
    End,
}

impl Op {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Push(_) => "PUSH",
            Op::Add => "ADD",
            Op::Sub => "SUB",
            Op::Mul => "MUL",
            Op::Dup => "DUP",
            Op::Swap => "SWAP",
            Op::Drop => "DROP",
            Op::Over => "OVER",
            Op::Repeat(_) => "REPEAT",
            Op::End => "END",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("`{0}` expects an integer immediate")]
    MissingImmediate(&'static str),
    #[error("immediate {value} out of range for {op}")]
    ImmediateOutOfRange { op: &'static str, value: i64 },
    #[error("END without matching REPEAT")]
    UnmatchedEnd,
    #[error("REPEAT without matching END")]
    UnmatchedRepeat,
    #[error("REPEAT nesting deeper than {MAX_NESTING}")]
    NestingTooDeep,
    #[error("program has {0} instructions (limit {MAX_INSTRUCTIONS})")]
    TooLong(usize),
}

/// A validated program: REPEAT/END balanced, nesting ≤ 2, immediates in range.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Program {
    ops: Vec<Op>,
}

impl Program {
    pub fn new(ops: Vec<Op>) -> Result<Self, ParseError> {
        validate(&ops)?;
        Ok(Program { ops })
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match op {
                Op::Push(n) => write!(f, "PUSH {n}")?,
                Op::Repeat(k) => write!(f, "REPEAT {k}")?,
                other => f.write_str(other.mnemonic())?,
            }
        }
        Ok(())
    }
}

impl From<Program> for String {
    fn from(p: Program) -> String {
        p.render()
    }
}

impl TryFrom<String> for Program {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, ParseError> {
        parse_program(&s)
    }
}

impl std::str::FromStr for Program {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, ParseError> {
        parse_program(s)
    }
}

fn validate(ops: &[Op]) -> Result<(), ParseError> {
    if ops.len() > MAX_INSTRUCTIONS {
        return Err(ParseError::TooLong(ops.len()));
    }
    let mut depth = 0usize;
    for op in ops {
        match *op {
            Op::Push(n) if !(-MAX_IMMEDIATE..=MAX_IMMEDIATE).contains(&n) => {
                return Err(ParseError::ImmediateOutOfRange {
                    op: "PUSH",
                    value: n,
                })
            }
            Op::Repeat(k) if k > MAX_REPEAT => {
                return Err(ParseError::ImmediateOutOfRange {
                    op: "REPEAT",
                    value: k as i64,
                })
            }
            Op::Repeat(_) => {
                depth += 1;
                if depth > MAX_NESTING {
                    return Err(ParseError::NestingTooDeep);
                }
            }
            Op::End => {
                depth = depth.checked_sub(1).ok_or(ParseError::UnmatchedEnd)?;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(ParseError::UnmatchedRepeat);
    }
    Ok(())
}

/// Parses whitespace-separated DSL source.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut words = text.split_whitespace();
    let mut ops = Vec::new();
    while let Some(word) = words.next() {
        let op = match word {
            "PUSH" => Op::Push(immediate(&mut words, "PUSH")?),
            "REPEAT" => {
                let k = immediate(&mut words, "REPEAT")?;
                if !(0..=MAX_REPEAT as i64).contains(&k) {
                    return Err(ParseError::ImmediateOutOfRange {
                        op: "REPEAT",
                        value: k,
                    });
                }
                Op::Repeat(k as u8)
            }
            "ADD" => Op::Add,
            "SUB" => Op::Sub,
            "MUL" => Op::Mul,
            "DUP" => Op::Dup,
            "SWAP" => Op::Swap,
            "DROP" => Op::Drop,
            "OVER" => Op::Over,
            "END" => Op::End,
            other => return Err(ParseError::UnknownOpcode(other.to_string())),
        };
        ops.push(op);
        if ops.len() > MAX_INSTRUCTIONS {
            return Err(ParseError::TooLong(ops.len()));
        }
    }
    Program::new(ops)
}

fn immediate<'a>(
    words: &mut impl Iterator<Item = &'a str>,
    op: &'static str,
) -> Result<i64, ParseError> {
    let word = words.next().ok_or(ParseError::MissingImmediate(op))?;
    // Reject things like "+3" or "03x"; accept an optional leading minus.
    let digits = word.strip_prefix('-').unwrap_or(word);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseError::MissingImmediate(op));
    }
    match word.parse::<i64>() {
        Ok(v) => {
            if op == "PUSH" && !(-MAX_IMMEDIATE..=MAX_IMMEDIATE).contains(&v) {
                return Err(ParseError::ImmediateOutOfRange { op, value: v });
            }
            Ok(v)
        }
        Err(_) => Err(ParseError::ImmediateOutOfRange { op, value: i64::MAX }),
    }
}

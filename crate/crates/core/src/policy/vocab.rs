//! Fixed token alphabet shared by task serialization, programs, and feedback.

use crate::dsl::{Op, Program};

/// Ordered token names; the id of a token is its index here.
pub const TOKENS: [&str; 30] = [
    "<BOS>", "<EOS>", "<SEP>", "<PASS>", "<FAIL>", "<ERR>", "<IN>", "<OUT>", ",", "-", "0", "1",
    "2", "3", "4", "5", "6", "7", "8", "9", "PUSH", "ADD", "SUB", "MUL", "DUP", "SWAP", "DROP",
    "OVER", "REPEAT", "END",
];

pub const VOCAB_SIZE: usize = TOKENS.len();

pub const BOS: u32 = 0;
/// End of a generated thought. Fixed at id 1.
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PASS: u32 = 3;
pub const FAIL: u32 = 4;
pub const ERR: u32 = 5;
pub const IN: u32 = 6;
pub const OUT: u32 = 7;
pub const COMMA: u32 = 8;
pub const NEG: u32 = 9;
pub const DIGIT0: u32 = 10;
pub const PUSH: u32 = 20;
pub const ADD: u32 = 21;
pub const SUB: u32 = 22;
pub const MUL: u32 = 23;
pub const DUP: u32 = 24;
pub const SWAP: u32 = 25;
pub const DROP: u32 = 26;
pub const OVER: u32 = 27;
pub const REPEAT: u32 = 28;
pub const END: u32 = 29;

pub fn token_name(id: u32) -> Option<&'static str> {
    TOKENS.get(id as usize).copied()
}

pub fn token_id(name: &str) -> Option<u32> {
    TOKENS.iter().position(|t| *t == name).map(|i| i as u32)
}

pub fn is_digit(id: u32) -> bool {
    (DIGIT0..DIGIT0 + 10).contains(&id)
}

/// Appends the sign and decimal digits of `value`.
pub fn push_int(out: &mut Vec<u32>, value: i64) {
    if value < 0 {
        out.push(NEG);
    }
    for b in value.unsigned_abs().to_string().bytes() {
        out.push(DIGIT0 + (b - b'0') as u32);
    }
}

pub fn encode_program(program: &Program) -> Vec<u32> {
    let mut out = Vec::with_capacity(program.len() * 2);
    for op in program.ops() {
        match *op {
            Op::Push(n) => {
                out.push(PUSH);
                push_int(&mut out, n);
            }
            Op::Repeat(k) => {
                out.push(REPEAT);
                push_int(&mut out, k as i64);
            }
            Op::Add => out.push(ADD),
            Op::Sub => out.push(SUB),
            Op::Mul => out.push(MUL),
            Op::Dup => out.push(DUP),
            Op::Swap => out.push(SWAP),
            Op::Drop => out.push(DROP),
            Op::Over => out.push(OVER),
            Op::End => out.push(END),
        }
    }
    out
}

/// Renders generated tokens as DSL source. A sign followed by digits becomes
/// one word; everything else maps to its token name, so malformed output
/// surfaces as a parse error downstream rather than being repaired here.
pub fn render_tokens(tokens: &[u32]) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut number = String::new();
    let flush = |number: &mut String, words: &mut Vec<String>| {
        if !number.is_empty() {
            words.push(std::mem::take(number));
        }
    };
    for &t in tokens {
        if t == EOS {
            break;
        }
        if is_digit(t) {
            number.push((b'0' + (t - DIGIT0) as u8) as char);
        } else if t == NEG {
            flush(&mut number, &mut words);
            number.push('-');
        } else {
            flush(&mut number, &mut words);
            words.push(token_name(t).unwrap_or("<?>").to_string());
        }
    }
    flush(&mut number, &mut words);
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_program;

    #[test]
    fn bijective_names() {
        for (i, name) in TOKENS.iter().enumerate() {
            assert_eq!(token_id(name), Some(i as u32));
        }
        assert_eq!(token_name(EOS), Some("<EOS>"));
        assert_eq!(token_name(END), Some("END"));
        assert_eq!(token_name(VOCAB_SIZE as u32), None);
    }

    #[test]
    fn program_tokens_render_back() {
        let p = parse_program("PUSH -12 REPEAT 3 DUP MUL END PUSH 7 SUB").unwrap();
        let mut toks = encode_program(&p);
        toks.push(EOS);
        assert_eq!(render_tokens(&toks), p.render());
    }

    #[test]
    fn malformed_tokens_do_not_parse() {
        let text = render_tokens(&[PUSH, SEP, ADD]);
        assert_eq!(text, "PUSH <SEP> ADD");
        assert!(parse_program(&text).is_err());
        assert!(parse_program(&render_tokens(&[DIGIT0 + 3, ADD])).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::arithmetic::{ArithmeticProblem, Operator, ANSWER_PREFIX};
use super::TaskError;

/// Outcome of checking a response against its problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// 1 iff the final answer line states the true answer.
    pub z: u8,
    /// One entry per equation line before the answer line.
    pub step_rewards: Vec<f64>,
    /// No answer line was found.
    pub truncated: bool,
}

/// A parsed `a op b = c` line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Equation {
    pub a: i32,
    pub op: Operator,
    pub b: i32,
    pub c: i32,
}

fn parse_int(s: &str) -> Option<(i32, &str)> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    if end == 0 || end > 3 {
        return None;
    }
    let v: i32 = rest[..end].parse().ok()?;
    Some((if neg { -v } else { v }, &rest[end..]))
}

fn is_decoration(c: char) -> bool {
    !c.is_ascii_alphanumeric() && !matches!(c, '+' | '-' | '=' | '?' | ' ' | '\n')
}

/// Parses one equation line. Trailing decoration symbols (such as a style
/// marker) are ignored.
pub fn parse_equation(line: &str) -> Option<Equation> {
    let (a, rest) = parse_int(line)?;
    let mut chars = rest.chars();
    let op = Operator::from_symbol(chars.next()?)?;
    let (b, rest) = parse_int(chars.as_str())?;
    let rest = rest.strip_prefix('=')?;
    let (c, rest) = parse_int(rest)?;
    rest.chars().all(is_decoration).then_some(Equation { a, op, b, c })
}

fn parse_answer(line: &str) -> Option<i32> {
    let (k, rest) = parse_int(line.strip_prefix(ANSWER_PREFIX)?)?;
    rest.is_empty().then_some(k)
}

fn is_answer_line(line: &str) -> bool {
    line.starts_with(ANSWER_PREFIX.trim_end())
}

/// Reward of equation line `t` (0-based): it must start from the true running
/// value, use the problem's next operator and operand, and state a correct
/// result.
pub fn step_reward(problem: &ArithmeticProblem, t: usize, line: &str) -> f64 {
    let Some(eq) = parse_equation(line) else { return 0.0 };
    if t >= problem.num_steps() {
        return 0.0;
    }
    let vals = problem.running_values();
    let ok = eq.a == vals[t] && eq.op == problem.operators()[t] && eq.b == problem.operands()[t + 1] && eq.c == eq.op.apply(eq.a, eq.b);
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Splits response text into step lines; a trailing empty line is dropped.
pub fn split_steps(response: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = response.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
}

/// Checks `response` line by line. Lines before the first answer line are
/// equation steps; the answer line decides `z`.
pub fn verify(problem: &ArithmeticProblem, response: &str) -> Verification {
    let mut step_rewards = Vec::new();
    for line in split_steps(response) {
        if is_answer_line(line) {
            let z = u8::from(parse_answer(line) == Some(problem.answer()));
            return Verification { z, step_rewards, truncated: false };
        }
        step_rewards.push(step_reward(problem, step_rewards.len(), line));
    }
    Verification { z: 0, step_rewards, truncated: true }
}

/// Recovers the problem from its rendered prompt.
pub fn parse_prompt(prompt: &str) -> Result<ArithmeticProblem, TaskError> {
    let body = prompt
        .strip_suffix("=?\n")
        .or_else(|| prompt.strip_suffix("=?"))
        .ok_or_else(|| TaskError::Parse(format!("prompt {prompt:?} lacks the `=?` suffix")))?;
    let mut operands = Vec::new();
    let mut operators = Vec::new();
    let mut chars = body.chars();
    loop {
        let d = chars.next().and_then(|c| c.to_digit(10)).ok_or_else(|| TaskError::Parse(format!("bad operand in {prompt:?}")))?;
        operands.push(d as i32);
        match chars.next() {
            None => break,
            Some(c) => operators.push(Operator::from_symbol(c).ok_or_else(|| TaskError::Parse(format!("bad operator {c:?}")))?),
        }
    }
    ArithmeticProblem::new(operands, operators)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Operator::*;

    fn p342() -> ArithmeticProblem {
        ArithmeticProblem::new(vec![3, 4, 2], vec![Plus, Plus]).unwrap()
    }

    #[test]
    fn correct_response() {
        let v = verify(&p342(), "3+4=7\n7+2=9\nANS 9");
        assert_eq!(v, Verification { z: 1, step_rewards: vec![1.0, 1.0], truncated: false });
    }

    #[test]
    fn wrong_value_poisons_the_chain() {
        let v = verify(&p342(), "3+4=8\n8+2=10\nANS 10");
        assert_eq!(v, Verification { z: 0, step_rewards: vec![0.0, 0.0], truncated: false });
    }

    #[test]
    fn empty_response_is_truncated() {
        let v = verify(&p342(), "");
        assert_eq!(v, Verification { z: 0, step_rewards: vec![], truncated: true });
    }

    #[test]
    fn markers_are_ignored_by_the_verifier() {
        let v = verify(&p342(), "3+4=7!\n7+2=9!\nANS 9");
        assert_eq!(v.z, 1);
        assert_eq!(v.step_rewards, vec![1.0, 1.0]);
    }

    #[test]
    fn garbage_and_missing_answer() {
        let v = verify(&p342(), "3+4=7\n7+=9\n");
        assert_eq!(v.step_rewards, vec![1.0, 0.0]);
        assert!(v.truncated);
        assert_eq!(v.z, 0);
        assert_eq!(verify(&p342(), "ANS 9x").z, 0);
        assert_eq!(verify(&p342(), "ANS 9").z, 1);
    }

    #[test]
    fn negative_values_parse() {
        let p = ArithmeticProblem::new(vec![2, 8, 1], vec![Minus, Plus]).unwrap();
        let v = verify(&p, &p.solution(None));
        assert_eq!(p.solution(None), "2-8=-6\n-6+1=-5\nANS -5");
        assert_eq!(v.z, 1);
        assert_eq!(v.step_rewards, vec![1.0, 1.0]);
    }

    #[test]
    fn prompt_round_trip() {
        for p in super::super::gen_problems(5, 200) {
            assert_eq!(parse_prompt(&p.prompt()).unwrap(), p);
        }
        assert!(parse_prompt("3+4").is_err());
        assert!(parse_prompt("3+=?\n").is_err());
    }
}

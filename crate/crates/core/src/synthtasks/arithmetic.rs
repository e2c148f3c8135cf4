use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;

pub const ANSWER_PREFIX: &str = "ANS ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Plus,
    Minus,
}

impl Operator {
    pub fn symbol(self) -> char {
        match self {
            Operator::Plus => '+',
            Operator::Minus => '-',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Operator::Plus),
            '-' => Some(Operator::Minus),
            _ => None,
        }
    }

    pub fn apply(self, a: i32, b: i32) -> i32 {
        match self {
            Operator::Plus => a + b,
            Operator::Minus => a - b,
        }
    }
}

/// Left-to-right chain of single-digit operands joined by `+`/`-`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArithmeticProblem {
    operands: Vec<i32>,
    operators: Vec<Operator>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub min_operands: usize,
    pub max_operands: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { min_operands: 2, max_operands: 6 }
    }
}

impl ArithmeticProblem {
    pub fn new(operands: Vec<i32>, operators: Vec<Operator>) -> Result<Self, TaskError> {
        if operands.len() < 2 || operands.len() > 6 {
            return Err(TaskError::Problem(format!("{} operands, expected 2..=6", operands.len())));
        }
        if operators.len() + 1 != operands.len() {
            return Err(TaskError::Problem(format!("{} operators for {} operands", operators.len(), operands.len())));
        }
        if let Some(x) = operands.iter().find(|x| !(0..=9).contains(*x)) {
            return Err(TaskError::Problem(format!("operand {x} outside 0..=9")));
        }
        Ok(Self { operands, operators })
    }

    pub fn operands(&self) -> &[i32] {
        &self.operands
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    /// Number of equation steps in a correct solution.
    pub fn num_steps(&self) -> usize {
        self.operators.len()
    }

    /// Running value after each step; entry 0 is the first operand.
    pub fn running_values(&self) -> Vec<i32> {
        let mut out = Vec::with_capacity(self.operands.len());
        let mut acc = self.operands[0];
        out.push(acc);
        for (op, b) in self.operators.iter().zip(&self.operands[1..]) {
            acc = op.apply(acc, *b);
            out.push(acc);
        }
        out
    }

    pub fn answer(&self) -> i32 {
        *self.running_values().last().expect("at least two operands")
    }

    /// Prompt text, e.g. `3+4-2=?\n`.
    pub fn prompt(&self) -> String {
        let mut s = self.operands[0].to_string();
        for (op, b) in self.operators.iter().zip(&self.operands[1..]) {
            s.push(op.symbol());
            s.push_str(&b.to_string());
        }
        s.push_str("=?\n");
        s
    }

    /// Ground-truth step-by-step solution; with `marker`, every equation line
    /// ends with it.
    pub fn solution(&self, marker: Option<char>) -> String {
        let vals = self.running_values();
        let mut s = String::new();
        for (t, (op, b)) in self.operators.iter().zip(&self.operands[1..]).enumerate() {
            s.push_str(&format!("{}{}{}={}", vals[t], op.symbol(), b, vals[t + 1]));
            if let Some(m) = marker {
                s.push(m);
            }
            s.push('\n');
        }
        s.push_str(ANSWER_PREFIX);
        s.push_str(&self.answer().to_string());
        s
    }
}

/// Deterministic problem list for `seed`.
pub fn gen_problems(seed: u64, count: usize) -> Vec<ArithmeticProblem> {
    gen_problems_with(seed, count, &GenConfig::default())
}

pub fn gen_problems_with(seed: u64, count: usize, cfg: &GenConfig) -> Vec<ArithmeticProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = cfg.min_operands.clamp(2, 6);
    let hi = cfg.max_operands.clamp(lo, 6);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(lo..=hi);
            let operands = (0..n).map(|_| rng.gen_range(0..=9)).collect();
            let operators = (1..n).map(|_| if rng.gen_bool(0.5) { Operator::Plus } else { Operator::Minus }).collect();
            ArithmeticProblem::new(operands, operators).expect("generated problem is valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_problem() {
        let p = ArithmeticProblem::new(vec![3, 4, 2], vec![Operator::Plus, Operator::Plus]).unwrap();
        assert_eq!(p.answer(), 9);
        assert_eq!(p.prompt(), "3+4+2=?\n");
        assert_eq!(p.solution(None), "3+4=7\n7+2=9\nANS 9");
        assert_eq!(p.solution(Some('!')), "3+4=7!\n7+2=9!\nANS 9");
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_problems(17, 500);
        assert_eq!(a, gen_problems(17, 500));
        assert_ne!(a, gen_problems(18, 500));
        for p in &a {
            assert!(p.operands().iter().all(|x| (0..=9).contains(x)));
            assert!((2..=6).contains(&p.operands().len()));
            assert!(p.running_values().iter().all(|v| i8::try_from(*v).is_ok()));
        }
    }

    #[test]
    fn generation_is_fast() {
        let t = std::time::Instant::now();
        let _ = gen_problems(1, 500);
        assert!(t.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn invalid_problems_rejected() {
        assert!(ArithmeticProblem::new(vec![3], vec![]).is_err());
        assert!(ArithmeticProblem::new(vec![3, 10], vec![Operator::Plus]).is_err());
        assert!(ArithmeticProblem::new(vec![3, 1], vec![]).is_err());
    }
}

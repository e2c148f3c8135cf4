use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::arithmetic::{ArithmeticProblem, Operator};
use super::TaskError;

/// One problem per line of a problem file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: usize,
    pub operands: Vec<i32>,
    pub operators: Vec<Operator>,
    pub prompt: String,
    pub answer: i32,
}

impl ProblemRecord {
    pub fn new(id: usize, p: &ArithmeticProblem) -> Self {
        Self { id, operands: p.operands().to_vec(), operators: p.operators().to_vec(), prompt: p.prompt(), answer: p.answer() }
    }

    pub fn problem(&self) -> Result<ArithmeticProblem, TaskError> {
        let p = ArithmeticProblem::new(self.operands.clone(), self.operators.clone())?;
        if p.prompt() != self.prompt || p.answer() != self.answer {
            return Err(TaskError::Parse(format!("problem record {} is inconsistent", self.id)));
        }
        Ok(p)
    }
}

/// One sampled response per line of a rollout file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub problem_id: usize,
    pub rollout: usize,
    pub text: String,
    pub z: u8,
    pub judge_score: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TaskError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtasks::gen_problems;

    #[test]
    fn problem_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("problems.jsonl");
        let probs = gen_problems(2, 30);
        let recs: Vec<ProblemRecord> = probs.iter().enumerate().map(|(i, p)| ProblemRecord::new(i, p)).collect();
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<ProblemRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
        let restored: Vec<_> = back.iter().map(|r| r.problem().unwrap()).collect();
        assert_eq!(restored, probs);
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"problem_id\":0}\n").unwrap();
        let err = read_jsonl::<RolloutRecord>(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"));
    }
}

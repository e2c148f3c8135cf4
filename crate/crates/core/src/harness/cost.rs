//! Measured against predicted token-forward counts for both decoding modes.

use std::fmt::Write as _;

use super::pipeline::CostRecord;
use super::HarnessError;
use crate::decode::{cost_estimate, DecodeMode};

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub problem_id: usize,
    pub mode: DecodeMode,
    pub prompt_len: usize,
    pub steps: usize,
    pub k: usize,
    pub mean_len: f64,
    pub measured: usize,
    pub predicted: f64,
    /// Every candidate had the same length, so the prediction must be exact.
    pub uniform: bool,
}

impl CostRow {
    /// A uniform-length run whose measurement differs from the prediction.
    pub fn mismatch(&self) -> bool {
        self.uniform && self.measured as f64 != self.predicted
    }
}

/// Rows per ledger and the rendered table. Fails when a mode is missing or
/// when a uniform-length run deviates from the closed form.
pub fn cost_report(records: &[CostRecord]) -> Result<(Vec<CostRow>, String), HarnessError> {
    for mode in [DecodeMode::CacheCarry, DecodeMode::ReEncode] {
        if !records.iter().any(|r| r.mode == mode) {
            return Err(HarnessError::Cost(format!("no ledger for mode {mode}")));
        }
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let l = &r.ledger;
        let mean_len = l.mean_candidate_len();
        let est = cost_estimate(l.prompt_len, l.steps, r.k, mean_len);
        let first = l.candidate_lengths.first().and_then(|v| v.first()).copied();
        let uniform = l.candidate_lengths.iter().flatten().all(|&n| Some(n) == first);
        rows.push(CostRow {
            problem_id: r.problem_id,
            mode: r.mode,
            prompt_len: l.prompt_len,
            steps: l.steps,
            k: r.k,
            mean_len,
            measured: l.token_forwards,
            predicted: match r.mode {
                DecodeMode::CacheCarry => est.cache_carry,
                DecodeMode::ReEncode => est.reencode,
            },
            uniform,
        });
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>7} {:<11} {:>4} {:>4} {:>2} {:>7} {:>9} {:>11} {:>7} {:>5}",
        "problem", "mode", "|x|", "N", "K", "L", "measured", "predicted", "ratio", "flag"
    );
    for r in &rows {
        let ratio = r.measured as f64 / r.predicted;
        let flag = if r.mismatch() { "DIFF" } else if r.uniform { "exact" } else { "" };
        let _ = writeln!(
            s,
            "{:>7} {:<11} {:>4} {:>4} {:>2} {:>7.2} {:>9} {:>11.1} {:>7.4} {:>5}",
            r.problem_id,
            r.mode.to_string(),
            r.prompt_len,
            r.steps,
            r.k,
            r.mean_len,
            r.measured,
            r.predicted,
            ratio,
            flag
        );
    }
    let total = |m: DecodeMode| rows.iter().filter(|r| r.mode == m).map(|r| r.measured).sum::<usize>();
    let (cc, re) = (total(DecodeMode::CacheCarry), total(DecodeMode::ReEncode));
    let _ = writeln!(s, "\ntotal token forwards: cache-carry {cc}, re-encode {re}, ratio {:.3}", re as f64 / cc as f64);

    let bad: Vec<String> = rows.iter().filter(|r| r.mismatch()).map(|r| format!("{} ({})", r.problem_id, r.mode)).collect();
    if !bad.is_empty() {
        return Err(HarnessError::Cost(format!("measured differs from predicted for uniform-length runs: {}", bad.join(", "))));
    }
    Ok((rows, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::CostLedger;

    fn record(mode: DecodeMode, forwards: usize) -> CostRecord {
        let ledger = CostLedger {
            prompt_len: 100,
            committed_tokens: 200,
            steps: 10,
            candidates: 50,
            candidate_tokens_sampled: 1000,
            token_forwards: forwards,
            reencode_count: 0,
            reencoded_positions: 0,
            candidate_lengths: vec![vec![20; 5]; 10],
        };
        CostRecord { problem_id: 0, mode, k: 5, fixed_length: Some(20), response: Vec::new(), ledger }
    }

    #[test]
    fn exact_rows_pass_and_mismatches_fail() {
        let (rows, table) = cost_report(&[record(DecodeMode::CacheCarry, 1100), record(DecodeMode::ReEncode, 10_500)]).unwrap();
        assert!(rows.iter().all(|r| r.uniform && !r.mismatch()));
        assert!(table.contains("exact"));
        assert!(cost_report(&[record(DecodeMode::CacheCarry, 1100), record(DecodeMode::ReEncode, 10_499)]).is_err());
    }

    #[test]
    fn missing_mode_is_reported() {
        let err = cost_report(&[record(DecodeMode::CacheCarry, 1100)]).unwrap_err();
        assert!(err.to_string().contains("re-encode"));
    }
}

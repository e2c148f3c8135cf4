//! Metric rows and their comma-separated files.
//!
//! `metrics.csv` holds `run_id,phase,metric,value,seed` and is a pure
//! function of config and seed. Wall-clock durations go to a separate
//! `timings.csv` so the metrics file can be compared by checksum.

use std::fmt::Write as _;
use std::path::Path;

use super::HarnessError;

pub const METRICS_HEADER: &str = "run_id,phase,metric,value,seed";
pub const TIMINGS_HEADER: &str = "run_id,phase,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub run_id: String,
    pub phase: String,
    pub seconds: f64,
}

fn check_field(name: &str, s: &str) -> Result<(), HarnessError> {
    if s.is_empty() || s.contains([',', '\n', '\r', '"']) {
        return Err(HarnessError::Metrics(format!("{name} {s:?} is empty or contains a delimiter")));
    }
    Ok(())
}

/// Append-only collection of metric rows for one run.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<(), HarnessError> {
        check_field("run id", &row.run_id)?;
        check_field("phase", &row.phase)?;
        check_field("metric", &row.metric)?;
        if !row.value.is_finite() {
            return Err(HarnessError::Metrics(format!("{} = {} is not finite", row.metric, row.value)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = MetricsRow>) -> Result<(), HarnessError> {
        rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Value of the first row named `metric`.
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?},{}", r.run_id, r.phase, r.metric, r.value, r.seed);
        }
        s
    }

    /// Strict parse: exact header, five fields per row, finite values.
    pub fn parse_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(HarnessError::Metrics("missing or wrong header".into()));
        }
        let mut log = MetricsLog::new();
        for (i, line) in lines.enumerate() {
            let at = |why: String| HarnessError::Metrics(format!("row {}: {why}", i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(at(format!("expected 5 fields, found {}", fields.len())));
            }
            let value: f64 = fields[3].parse().map_err(|e| at(format!("value: {e}")))?;
            let seed: u64 = fields[4].parse().map_err(|e| at(format!("seed: {e}")))?;
            log.push(MetricsRow {
                run_id: fields[0].into(),
                phase: fields[1].into(),
                metric: fields[2].into(),
                value,
                seed,
            })
            .map_err(|e| at(e.to_string()))?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse_csv(&text).map_err(|e| HarnessError::Metrics(format!("{}: {e}", path.display())))
    }
}

pub fn timings_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from(TIMINGS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.3}", r.run_id, r.phase, r.seconds);
    }
    s
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(metric: &str, value: f64) -> MetricsRow {
        MetricsRow { run_id: "r1".into(), phase: "eval".into(), metric: metric.into(), value, seed: 3 }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut log = MetricsLog::new();
        log.push(row("a", 0.1 + 0.2)).unwrap();
        log.push(row("b", -1e-300)).unwrap();
        log.push(row("c", 3.0)).unwrap();
        let text = log.to_csv();
        let back = MetricsLog::parse_csv(&text).unwrap();
        assert_eq!(back.rows(), log.rows());
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn bad_rows_are_rejected() {
        let mut log = MetricsLog::new();
        assert!(log.push(row("nan", f64::NAN)).is_err());
        assert!(log.push(row("a,b", 1.0)).is_err());
        assert!(MetricsLog::parse_csv("run_id,phase\n").is_err());
        assert!(MetricsLog::parse_csv(&format!("{METRICS_HEADER}\nr,p,m,1.0\n")).is_err());
        assert!(MetricsLog::parse_csv(&format!("{METRICS_HEADER}\nr,p,m,inf,1\n")).is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}

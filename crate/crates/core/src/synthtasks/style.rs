use serde::{Deserialize, Serialize};

use super::verify::split_steps;
use super::TaskError;

pub const DEFAULT_MARKER: char = '!';

/// Programmatic style judge: a response passes when enough of its equation
/// steps carry the marker symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleJudgeSpec {
    pub marker: char,
    pub threshold: f64,
}

impl Default for StyleJudgeSpec {
    fn default() -> Self {
        Self { marker: DEFAULT_MARKER, threshold: 0.5 }
    }
}

impl StyleJudgeSpec {
    pub fn new(marker: char, threshold: f64) -> Result<Self, TaskError> {
        let s = Self { marker, threshold };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(TaskError::Config(format!("style threshold {} outside (0, 1]", self.threshold)));
        }
        if self.marker.is_ascii_alphanumeric() || matches!(self.marker, '+' | '-' | '=' | '\n' | ' ') {
            return Err(TaskError::Config(format!("marker {:?} collides with the step grammar", self.marker)));
        }
        Ok(())
    }

    /// Fraction of steps containing the marker. The answer line is not a
    /// step; a response without steps scores 0.
    pub fn score(&self, response: &str) -> f64 {
        let steps: Vec<&str> = split_steps(response).into_iter().filter(|l| !l.starts_with("ANS")).collect();
        if steps.is_empty() {
            return 0.0;
        }
        steps.iter().filter(|l| l.contains(self.marker)).count() as f64 / steps.len() as f64
    }

    pub fn judge(&self, response: &str) -> u8 {
        u8::from(self.score(response) >= self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_fraction_of_marked_steps() {
        let j = StyleJudgeSpec::default();
        assert_eq!(j.score("3+4=7!\n7+2=9!\nANS 9"), 1.0);
        assert_eq!(j.score("3+4=7!\n7+2=9\nANS 9"), 0.5);
        assert_eq!(j.judge("3+4=7!\n7+2=9\nANS 9"), 1);
        assert_eq!(j.judge("3+4=7\n7+2=9\nANS 9!"), 0);
        assert_eq!(j.score(""), 0.0);
    }

    #[test]
    fn threshold_validated() {
        assert!(StyleJudgeSpec::new('!', 0.0).is_err());
        assert!(StyleJudgeSpec::new('!', 1.0).is_ok());
        assert!(StyleJudgeSpec::new('7', 0.5).is_err());
    }
}

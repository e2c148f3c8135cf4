use super::arithmetic::ArithmeticProblem;
use super::style::StyleJudgeSpec;
use super::verify::verify;
use crate::mahdpo::PreferencePair;

pub const ACCURACY_OBJECTIVE: usize = 0;
pub const STYLE_OBJECTIVE: usize = 1;

/// Pairs the first correct rollout with the first incorrect one, per problem.
/// `sample(problem, index)` returns the text of rollout `index`.
pub fn build_accuracy_pairs<F, E>(mut sample: F, problems: &[ArithmeticProblem], rollouts: usize) -> Result<Vec<PreferencePair>, E>
where
    F: FnMut(&ArithmeticProblem, usize) -> Result<String, E>,
{
    let mut out = Vec::new();
    for p in problems {
        let mut first_right: Option<String> = None;
        let mut first_wrong: Option<String> = None;
        for m in 0..rollouts {
            let text = sample(p, m)?;
            if verify(p, &text).z == 1 {
                first_right.get_or_insert(text);
            } else {
                first_wrong.get_or_insert(text);
            }
        }
        if let (Some(chosen), Some(rejected)) = (first_right, first_wrong) {
            out.push(PreferencePair { prompt: p.prompt(), chosen, rejected, objective: ACCURACY_OBJECTIVE });
        }
    }
    Ok(out)
}

/// Pairs the highest-scoring rollout under the style judge with the lowest,
/// when their scores differ. Ties go to the earliest rollout.
pub fn build_style_pairs<F, E>(
    mut sample: F,
    problems: &[ArithmeticProblem],
    rollouts: usize,
    judge: &StyleJudgeSpec,
) -> Result<Vec<PreferencePair>, E>
where
    F: FnMut(&ArithmeticProblem, usize) -> Result<String, E>,
{
    let mut out = Vec::new();
    for p in problems {
        let texts: Vec<String> = (0..rollouts).map(|m| sample(p, m)).collect::<Result<_, _>>()?;
        if let Some((hi, lo)) = extremes(&texts.iter().map(|t| judge.score(t)).collect::<Vec<_>>()) {
            out.push(PreferencePair {
                prompt: p.prompt(),
                chosen: texts[hi].clone(),
                rejected: texts[lo].clone(),
                objective: STYLE_OBJECTIVE,
            });
        }
    }
    Ok(out)
}

/// Indices of the first maximum and first minimum, if they differ in value.
pub fn extremes(scores: &[f64]) -> Option<(usize, usize)> {
    if scores.is_empty() {
        return None;
    }
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[hi] {
            hi = i;
        }
        if s < scores[lo] {
            lo = i;
        }
    }
    (scores[hi] > scores[lo]).then_some((hi, lo))
}

/// Supervised corpus of ground-truth solutions: even-indexed problems are
/// rendered with the style marker on every step, odd-indexed ones without.
pub fn sft_corpus(problems: &[ArithmeticProblem], judge: &StyleJudgeSpec) -> Vec<(String, String)> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| (p.prompt(), p.solution((i % 2 == 0).then_some(judge.marker))))
        .collect()
}

//! Scripted rollout policy and a from-definition recomputation of hindsight
//! targets.

use moalign::policy::TokenizerSpec;
use moalign::prmlab::{PrmError, PrmLabelConfig, RolloutPolicy, StepTrajectory};
use moalign::synthtasks::{verify, ArithmeticProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Continues the reference solution from wherever the prefix stopped, then
/// picks one of four endings by `(seed, stream)`.
pub struct Scripted {
    pub tok: TokenizerSpec,
    pub problem: ArithmeticProblem,
}

impl Scripted {
    fn text(&self, prefix_lines: usize, seed: u64, stream: u64) -> (String, bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let lines: Vec<String> = self.problem.solution(None).split('\n').map(str::to_string).collect();
        let rest = &lines[prefix_lines.min(lines.len())..];
        let eqs = &rest[..rest.len() - 1];
        let answer = self.problem.answer();
        match rng.gen_range(0..4) {
            0 => (rest.join("\n"), true),
            1 => {
                let mut v = eqs.to_vec();
                v.push(format!("ANS {}", answer + 1));
                (v.join("\n"), true)
            }
            2 => (format!("{}1+1=2\n", "1+1=2\n".repeat(30)), false),
            _ => (format!("ANS {}", answer - 1), true),
        }
    }
}

impl RolloutPolicy for Scripted {
    fn complete(&self, _prompt: &[usize], prefix: &[usize], seed: u64, stream: u64) -> Result<Vec<usize>, PrmError> {
        let lines = prefix.iter().filter(|&&t| t == self.tok.separator()).count();
        let (text, eos) = self.text(lines, seed, stream);
        let mut out = self.tok.encode(&text)?;
        if eos {
            out.push(self.tok.eos());
        }
        Ok(out)
    }
}

/// Splits tokens after every separator or EOS.
pub fn steps_of(tok: &TokenizerSpec, tokens: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &t in tokens {
        out.last_mut().unwrap().push(t);
        if t == tok.separator() || t == tok.eos() {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

pub fn ends_response(tok: &TokenizerSpec, step: &[usize]) -> bool {
    step.last() == Some(&tok.eos()) || tok.decode(step).starts_with("ANS")
}

/// Straight recomputation of every target from its definition.
pub fn brute_force(
    tok: &TokenizerSpec,
    problem: &ArithmeticProblem,
    policy: &Scripted,
    traj: &StepTrajectory,
    rewards: &[f64],
    cfg: &PrmLabelConfig,
    seed: u64,
) -> Vec<f64> {
    let mut targets = Vec::new();
    for t in 1..=traj.steps.len() {
        let prefix: Vec<usize> = traj.steps[..t].concat();
        let mut total = 0.0;
        for m in 0..cfg.rollouts {
            let (n, z) = if ends_response(tok, &traj.steps[t - 1]) {
                let v = verify(problem, &tok.decode(&prefix));
                (t, if v.truncated { 0 } else { v.z })
            } else {
                let stream = ((t as u64 - 1) << 32) | m as u64;
                let completion = policy.complete(&traj.prompt, &prefix, seed, stream).unwrap();
                let mut all = traj.steps[..t].to_vec();
                let mut finished = false;
                for s in steps_of(tok, &completion) {
                    if all.len() == cfg.max_steps {
                        break;
                    }
                    let end = ends_response(tok, &s);
                    all.push(s);
                    if end {
                        finished = true;
                        break;
                    }
                }
                let v = verify(problem, &tok.decode(&all.concat()));
                (all.len(), if finished && !v.truncated { v.z } else { 0 })
            };
            total += rewards[t - 1] + cfg.gamma.powi((n - t) as i32) * f64::from(z);
        }
        targets.push(total / cfg.rollouts as f64);
    }
    targets
}

pub fn trajectory(tok: &TokenizerSpec, problem: &ArithmeticProblem, corrupt: Option<usize>) -> StepTrajectory {
    let mut lines: Vec<String> = problem.solution(None).split('\n').map(str::to_string).collect();
    if let Some(i) = corrupt {
        let i = i % (lines.len() - 1);
        lines[i].push('1');
    }
    let mut tokens = tok.encode(&lines.join("\n")).unwrap();
    tokens.push(tok.eos());
    StepTrajectory::new(tok.encode_prompt(&problem.prompt()).unwrap(), steps_of(tok, &tokens)).unwrap()
}

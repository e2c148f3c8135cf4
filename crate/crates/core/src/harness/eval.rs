//! Evaluation of every decode configuration over several seeds.

use super::metrics::{mean_std, MetricsLog};
use super::pipeline::{
    eval_problems, guidance, preference_metrics, run_job, DecodeJob, DecodeRecord, Phase, RunDir, StyleScorer,
};
use super::{HarnessError, ScorerKind};
use crate::decode::{DecodeMode, StepScorer};
use crate::mahdpo::PreferencePair;
use crate::policy::HeadSource;
use crate::synthtasks::{read_jsonl, OracleScorer};

/// Per-seed accuracy and style rate of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub config: String,
    pub accuracy: Vec<f64>,
    pub style: Vec<f64>,
    /// Mean token forwards per response.
    pub token_forwards: f64,
}

impl EvalSummary {
    pub fn from_records(config: &str, records: &[DecodeRecord], seeds: usize) -> Result<Self, HarnessError> {
        let mut accuracy = Vec::with_capacity(seeds);
        let mut style = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let of: Vec<&DecodeRecord> = records.iter().filter(|r| r.seed_index == s).collect();
            if of.is_empty() {
                return Err(HarnessError::Config(format!("{config}: no outputs for seed {s}")));
            }
            let n = of.len() as f64;
            accuracy.push(of.iter().map(|r| f64::from(r.z)).sum::<f64>() / n);
            style.push(of.iter().map(|r| f64::from(r.style)).sum::<f64>() / n);
        }
        let token_forwards = records.iter().map(|r| r.ledger.token_forwards as f64).sum::<f64>() / records.len() as f64;
        Ok(Self { config: config.into(), accuracy, style, token_forwards })
    }

    fn push_rows(&self, run: &RunDir, log: &mut MetricsLog, seed: u64) -> Result<(), HarnessError> {
        let (am, asd) = mean_std(&self.accuracy);
        let (sm, ssd) = mean_std(&self.style);
        let name = |m: &str| format!("eval.{}.{m}", self.config);
        log.push(run.row(Phase::Eval, name("accuracy.mean"), am, seed))?;
        log.push(run.row(Phase::Eval, name("accuracy.std"), asd, seed))?;
        log.push(run.row(Phase::Eval, name("style.mean"), sm, seed))?;
        log.push(run.row(Phase::Eval, name("style.std"), ssd, seed))?;
        log.push(run.row(Phase::Eval, name("token_forwards"), self.token_forwards, seed))?;
        Ok(())
    }
}

/// Evaluates, over `eval.seeds` seeds:
///
/// * `base.plain` and `base.guided`: the supervised policy unguided and
///   oracle-guided with `decode.k` candidates;
/// * `policy.plain` and `policy.guided`: the trained policy under
///   `decode.weights`, the guided run read from the decode phase;
/// * `sweep{j}`: the trained policy sampled under each sweep weight vector.
///
/// Also reports held-out preference accuracy and mean margin per head and the
/// per-seed lift of oracle guidance over unguided decoding.
pub fn eval_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    let start = std::time::Instant::now();
    let out = eval_inner(run).map_err(|e| HarnessError::Phase { phase: Phase::Eval.name(), source: Box::new(e) })?;
    run.record_timing(Phase::Eval, start.elapsed().as_secs_f64())?;
    Ok(out)
}

fn eval_inner(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    let cfg = &run.cfg;
    let seed = run.seed("eval");
    let seeds = cfg.eval_seeds;
    let base = run.load_policy(Phase::Sft)?;
    let policy = run.load_policy(Phase::TrainMahdpo)?;
    let tok = policy.tokenizer().clone();
    let problems = eval_problems(run);
    if problems.is_empty() {
        return Err(HarnessError::Config("the evaluation set is empty".into()));
    }
    let oracle = OracleScorer::new(tok.clone());
    let style = StyleScorer { tokenizer: &tok, marker: cfg.style.marker };
    let accuracy_only = guidance(ScorerKind::Oracle, &[1.0, 0.0], &oracle, None, &style)?;
    let mut log = MetricsLog::new();
    let mut summaries = Vec::new();

    let plain = |name: &str, model, source| DecodeJob {
        name: name.into(),
        model,
        source,
        k: 1,
        scorer: None,
        mode: DecodeMode::CacheCarry,
    };
    let base_plain = run_job(run, &plain("base.plain", &base, HeadSource::Head(0)), &problems)?;
    let guided_job = DecodeJob {
        name: "base.guided".into(),
        model: &base,
        source: HeadSource::Head(0),
        k: cfg.decode.k,
        scorer: accuracy_only.as_ref().map(|s| s as &dyn StepScorer),
        mode: cfg.decode.mode,
    };
    let base_guided = run_job(run, &guided_job, &problems)?;
    let bp = EvalSummary::from_records("base.plain", &base_plain, seeds)?;
    let bg = EvalSummary::from_records("base.guided", &base_guided, seeds)?;
    let gaps: Vec<f64> = bg.accuracy.iter().zip(&bp.accuracy).map(|(g, p)| g - p).collect();
    summaries.push(bp);
    summaries.push(bg);

    let weights = HeadSource::Ensemble(cfg.decode.weights.clone());
    let pp = run_job(run, &plain("policy.plain", &policy, weights), &problems)?;
    summaries.push(EvalSummary::from_records("policy.plain", &pp, seeds)?);
    let decoded: Vec<DecodeRecord> = read_jsonl(&run.path(Phase::Decode, "outputs.jsonl"))
        .map_err(|_| HarnessError::MissingArtifact("decode/outputs.jsonl".into()))?;
    summaries.push(EvalSummary::from_records("policy.guided", &decoded, seeds)?);

    let mut sweep = Vec::new();
    for (j, w) in cfg.eval_sweep.iter().enumerate() {
        let name = format!("sweep{j}");
        let recs = run_job(run, &plain(&name, &policy, HeadSource::Ensemble(w.clone())), &problems)?;
        sweep.push((w.clone(), EvalSummary::from_records(&name, &recs, seeds)?));
    }

    for s in &summaries {
        s.push_rows(run, &mut log, seed)?;
    }
    let (gm, gsd) = mean_std(&gaps);
    log.push(run.row(Phase::Eval, "eval.guided_gap.mean", gm, seed))?;
    log.push(run.row(Phase::Eval, "eval.guided_gap.std", gsd, seed))?;
    for (j, (w, s)) in sweep.iter().enumerate() {
        for (i, wi) in w.iter().enumerate() {
            log.push(run.row(Phase::Eval, format!("eval.sweep{j}.w{i}"), *wi, seed))?;
        }
        s.push_rows(run, &mut log, seed)?;
    }

    let held: Vec<PreferencePair> = read_jsonl(&run.path(Phase::TrainMahdpo, "heldout_pairs.jsonl"))
        .map_err(|_| HarnessError::MissingArtifact("mahdpo/heldout_pairs.jsonl".into()))?;
    if !held.is_empty() {
        log.extend(preference_metrics(run, Phase::Eval, &policy, &held, cfg.train.beta, seed)?)?;
    }
    run.write_metrics(Phase::Eval, &log)?;
    Ok(log)
}

//! The six pipeline phases and the run directory they share.

use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PrmInit, RunConfig, ScorerKind};
use super::metrics::{timings_csv, MetricsLog, MetricsRow, TimingRow, TIMINGS_HEADER};
use super::{phase_seed, run_id, HarnessError};
use crate::decode::{
    continue_plain, decode, CostLedger, DecodeConfig, DecodeMode, StepScorer, WeightedScorer,
};
use crate::mahdpo::{
    encode_pairs, encode_sft, evaluate_preferences, sft_loss, token_accuracy, train_mahdpo, train_sft, PolicyHead,
    PreferencePair, SftConfig, TrainConfig,
};
use crate::policy::{HeadSource, ModelDims, PolicyModel, TokenizerSpec};
use crate::prmlab::{
    hindsight_targets, majority_vote_label, split_token_steps, train_bt_reward, train_classifier_prm, train_value_prm,
    ArithmeticOracle, LabelMode, LabeledRecord, PolicyRollout, PrefixExample, PrmTrainConfig, RewardKind, RewardModel,
    ScoredPair, StepTrajectory,
};
use crate::synthtasks::{
    build_accuracy_pairs, build_style_pairs, gen_problems, read_jsonl, sft_corpus, verify, write_jsonl,
    ArithmeticProblem, OracleScorer, ProblemRecord, RolloutRecord, StyleJudgeSpec, ACCURACY_OBJECTIVE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Sft,
    Label,
    TrainPrm,
    TrainMahdpo,
    Decode,
    Eval,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Sft, Phase::Label, Phase::TrainPrm, Phase::TrainMahdpo, Phase::Decode, Phase::Eval];

    /// Directory and metrics name of the phase.
    pub fn name(self) -> &'static str {
        match self {
            Phase::Sft => "sft",
            Phase::Label => "label",
            Phase::TrainPrm => "prm",
            Phase::TrainMahdpo => "mahdpo",
            Phase::Decode => "decode",
            Phase::Eval => "eval",
        }
    }
}

/// One run directory plus the configuration that produced it.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub run_id: String,
}

impl RunDir {
    /// Creates the directory if needed and writes the canonical config.
    pub fn create(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        cfg.save(&root.join("config.txt"))?;
        let run_id = run_id(&cfg);
        Ok(Self { root, cfg, run_id })
    }

    pub fn path(&self, phase: Phase, file: &str) -> PathBuf {
        self.root.join(phase.name()).join(file)
    }

    fn phase_dir(&self, phase: Phase) -> Result<PathBuf, HarnessError> {
        let dir = self.root.join(phase.name());
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        Ok(dir)
    }

    fn require(&self, phase: Phase, file: &str) -> Result<PathBuf, HarnessError> {
        let p = self.path(phase, file);
        if p.exists() {
            Ok(p)
        } else {
            Err(HarnessError::MissingArtifact(format!("{}/{file}", phase.name())))
        }
    }

    pub fn seed(&self, name: &str) -> u64 {
        phase_seed(self.cfg.seed, name)
    }

    pub fn row(&self, phase: Phase, metric: impl Into<String>, value: f64, seed: u64) -> MetricsRow {
        MetricsRow { run_id: self.run_id.clone(), phase: phase.name().into(), metric: metric.into(), value, seed }
    }

    /// Writes a phase's metrics and rebuilds the run-level `metrics.csv`
    /// from every phase present, in phase order.
    pub fn write_metrics(&self, phase: Phase, log: &MetricsLog) -> Result<(), HarnessError> {
        self.phase_dir(phase)?;
        log.save(&self.path(phase, "metrics.csv"))?;
        let mut all = MetricsLog::new();
        for p in Phase::ALL {
            let path = self.path(p, "metrics.csv");
            if path.exists() {
                all.extend(MetricsLog::load(&path)?.rows().iter().cloned())?;
            }
        }
        all.save(&self.root.join("metrics.csv"))
    }

    /// Replaces the phase's row in `timings.csv`.
    pub fn record_timing(&self, phase: Phase, seconds: f64) -> Result<(), HarnessError> {
        let path = self.root.join("timings.csv");
        let mut rows: Vec<TimingRow> = Vec::new();
        if let Ok(text) = std::fs::read_to_string(&path) {
            for line in text.lines().skip_while(|l| *l == TIMINGS_HEADER).filter(|l| *l != TIMINGS_HEADER) {
                let f: Vec<&str> = line.split(',').collect();
                if let [id, ph, secs] = f[..] {
                    if ph != phase.name() {
                        if let Ok(s) = secs.parse() {
                            rows.push(TimingRow { run_id: id.into(), phase: ph.into(), seconds: s });
                        }
                    }
                }
            }
        }
        rows.push(TimingRow { run_id: self.run_id.clone(), phase: phase.name().into(), seconds });
        std::fs::write(&path, timings_csv(&rows)).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn metrics(&self) -> Result<MetricsLog, HarnessError> {
        MetricsLog::load(&self.root.join("metrics.csv"))
    }

    pub fn load_policy(&self, phase: Phase) -> Result<PolicyModel, HarnessError> {
        Ok(PolicyModel::load(&self.require(phase, "policy.ckpt")?)?)
    }
}

/// Seed of item `index` under `base`.
pub(crate) fn item_seed(base: u64, index: usize) -> u64 {
    phase_seed(base, &index.to_string())
}

/// Tokenizer and model shape of a run.
pub(crate) fn model_dims(cfg: &RunConfig, tok: &TokenizerSpec) -> ModelDims {
    ModelDims { vocab_size: tok.vocab_size(), ..cfg.model.clone() }
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    Ok(write_jsonl(path, records)?)
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    Ok(read_jsonl(path)?)
}

fn problem_records(problems: &[ArithmeticProblem]) -> Vec<ProblemRecord> {
    problems.iter().enumerate().map(|(i, p)| ProblemRecord::new(i, p)).collect()
}

fn timed<T>(run: &RunDir, phase: Phase, f: impl FnOnce() -> Result<T, HarnessError>) -> Result<T, HarnessError> {
    let start = Instant::now();
    log::info!("phase {} started", phase.name());
    let out = f().map_err(|e| HarnessError::Phase { phase: phase.name(), source: Box::new(e) })?;
    let secs = start.elapsed().as_secs_f64();
    log::info!("phase {} finished in {secs:.1}s", phase.name());
    run.record_timing(phase, secs)?;
    Ok(out)
}

/// Supervised warm-up of the multi-head policy on ground-truth solutions,
/// half of them rendered in the marked style.
pub fn sft_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    timed(run, Phase::Sft, || {
        let cfg = &run.cfg;
        let seed = run.seed("sft");
        let tok = TokenizerSpec::default();
        let problems = gen_problems(seed, cfg.data.sft_problems);
        if problems.is_empty() {
            return Err(HarnessError::Config("data.sft_problems must be positive".into()));
        }
        run.phase_dir(Phase::Sft)?;
        write_records(&run.path(Phase::Sft, "problems.jsonl"), &problem_records(&problems))?;
        let mut model = PolicyModel::new(model_dims(cfg, &tok), tok, seed)?;
        let data = encode_sft(&model, &sft_corpus(&problems, &cfg.style))?;
        let report = train_sft(&mut model, &data, &SftConfig { seed, ..cfg.sft.clone() })?;
        model.save(&run.path(Phase::Sft, "policy.ckpt"))?;

        let probe = &data[..data.len().min(256)];
        let mut log = MetricsLog::new();
        log.push(run.row(Phase::Sft, "sft.steps", report.step_losses.len() as f64, seed))?;
        log.push(run.row(Phase::Sft, "sft.loss", sft_loss(&model, probe)?, seed))?;
        log.push(run.row(Phase::Sft, "sft.token_accuracy", token_accuracy(&model, probe)?, seed))?;
        run.write_metrics(Phase::Sft, &log)?;
        Ok(log)
    })
}

/// Rollouts of `rollouts` samples per problem from head 0, addressed by
/// stream `(problem << 32) | rollout`.
fn sample_rollouts(
    model: &PolicyModel,
    problems: &[ArithmeticProblem],
    rollouts: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<Vec<String>>, HarnessError> {
    let tok = model.tokenizer();
    let mut out = Vec::with_capacity(problems.len());
    for (i, p) in problems.iter().enumerate() {
        let prompt = tok.encode_prompt(&p.prompt())?;
        let (cache, _) = model.encode_prompt(&prompt)?;
        let mut texts = Vec::with_capacity(rollouts);
        for r in 0..rollouts {
            let stream = ((i as u64) << 32) | r as u64;
            let toks = continue_plain(
                model,
                &HeadSource::Head(0),
                cache.clone(),
                &[],
                &cfg.decode.sampling,
                seed,
                stream,
                cfg.decode.t_max,
            )?;
            texts.push(tok.decode(&toks));
        }
        out.push(texts);
    }
    Ok(out)
}

/// Judges a (partial) response text by outcome correctness.
fn correctness_judge(tok: &TokenizerSpec) -> impl Fn(&[usize], &[usize]) -> u8 + '_ {
    move |prompt: &[usize], response: &[usize]| match crate::synthtasks::parse_prompt(&tok.decode(prompt)) {
        Ok(p) => verify(&p, &tok.decode(response)).z,
        Err(_) => 0,
    }
}

fn style_judge<'a>(tok: &'a TokenizerSpec, judge: &'a StyleJudgeSpec) -> impl Fn(&[usize], &[usize]) -> u8 + 'a {
    move |_prompt: &[usize], response: &[usize]| judge.judge(&tok.decode(response))
}

/// Samples rollouts, builds accuracy and style preference pairs, and labels
/// step prefixes for the reward model.
pub fn label_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    timed(run, Phase::Label, || {
        let cfg = &run.cfg;
        let seed = run.seed("label");
        let model = run.load_policy(Phase::Sft)?;
        run.phase_dir(Phase::Label)?;

        let problems = gen_problems(run.seed("label.pairs"), cfg.data.pair_problems);
        let texts = sample_rollouts(&model, &problems, cfg.data.pair_rollouts, cfg, seed)?;
        let mut records = Vec::new();
        for (i, (p, ts)) in problems.iter().zip(&texts).enumerate() {
            for (r, t) in ts.iter().enumerate() {
                records.push(RolloutRecord {
                    problem_id: i,
                    rollout: r,
                    text: t.clone(),
                    z: verify(p, t).z,
                    judge_score: cfg.style.score(t),
                });
            }
        }
        write_records(&run.path(Phase::Label, "problems.jsonl"), &problem_records(&problems))?;
        write_records(&run.path(Phase::Label, "rollouts.jsonl"), &records)?;

        let mut pairs: Vec<PreferencePair> = Vec::new();
        for (i, p) in problems.iter().enumerate() {
            let one = std::slice::from_ref(p);
            let take = |_: &ArithmeticProblem, m: usize| Ok::<_, Infallible>(texts[i][m].clone());
            pairs.extend(build_accuracy_pairs(take, one, cfg.data.pair_rollouts).unwrap_or_default());
        }
        for (i, p) in problems.iter().enumerate() {
            let one = std::slice::from_ref(p);
            let take = |_: &ArithmeticProblem, m: usize| Ok::<_, Infallible>(texts[i][m].clone());
            pairs.extend(build_style_pairs(take, one, cfg.data.pair_rollouts, &cfg.style).unwrap_or_default());
        }
        write_records(&run.path(Phase::Label, "pairs.jsonl"), &pairs)?;

        let prm_records = label_prefixes(run, &model)?;
        write_records(&run.path(Phase::Label, "prm_labels.jsonl"), &prm_records)?;

        let n = records.len().max(1) as f64;
        let mut log = MetricsLog::new();
        let row = |m: &str, v: f64| run.row(Phase::Label, m, v, seed);
        log.push(row("label.rollout_accuracy", records.iter().map(|r| f64::from(r.z)).sum::<f64>() / n))?;
        log.push(row("label.rollout_style_rate", records.iter().map(|r| f64::from(cfg.style.judge(&r.text))).sum::<f64>() / n))?;
        for obj in 0..cfg.model.objective_heads {
            log.push(row(&format!("label.pairs.obj{obj}"), pairs.iter().filter(|p| p.objective == obj).count() as f64))?;
        }
        log.push(row("label.prm_examples", prm_records.len() as f64))?;
        if !prm_records.is_empty() {
            let mean = prm_records.iter().map(|r| r.label).sum::<f64>() / prm_records.len() as f64;
            log.push(row("label.prm_mean_label", mean))?;
        }
        run.write_metrics(Phase::Label, &log)?;
        Ok(log)
    })
}

/// Step-prefix labels for the configured label mode. Outcome-BT needs no
/// prefix labels.
fn label_prefixes(run: &RunDir, model: &PolicyModel) -> Result<Vec<LabeledRecord>, HarnessError> {
    let cfg = &run.cfg;
    let mode = cfg.label.mode;
    if mode == LabelMode::OutcomeBt {
        return Ok(Vec::new());
    }
    let tok = model.tokenizer().clone();
    let (sep, eos) = (tok.separator(), tok.eos());
    let base = run.seed("label.prm");
    let problems = gen_problems(run.seed("label.prm.problems"), cfg.data.prm_problems);
    let policy = PolicyRollout::new(model, HeadSource::Head(0), cfg.decode.sampling.clone(), cfg.decode.t_max);
    let oracle = ArithmeticOracle::new(tok.clone());
    let correct = correctness_judge(&tok);
    let styled = style_judge(&tok, &cfg.style);
    let mut out = Vec::new();
    for (i, p) in problems.iter().enumerate() {
        let seed = item_seed(base, i);
        let prompt_text = p.prompt();
        let prompt = tok.encode_prompt(&prompt_text)?;
        let (cache, _) = model.encode_prompt(&prompt)?;
        let response =
            continue_plain(model, &HeadSource::Head(0), cache, &[], &cfg.decode.sampling, seed, u64::MAX, cfg.decode.t_max)?;
        let mut steps = split_token_steps(&response, sep, eos);
        steps.truncate(cfg.label.max_steps);
        if steps.is_empty() {
            continue;
        }
        let traj = StepTrajectory::new(prompt.clone(), steps)?;
        let step_texts: Vec<String> = traj.steps.iter().map(|s| tok.decode(s)).collect();
        let record = |t: usize, label: f64| LabeledRecord {
            prompt: prompt_text.clone(),
            prefix_steps: step_texts[..t].to_vec(),
            label_kind: mode,
            label,
        };
        match mode {
            LabelMode::Value => {
                for vt in hindsight_targets(&traj, &policy, &oracle, &cfg.label, seed, sep, eos)? {
                    out.push(record(vt.step, vt.target));
                }
            }
            LabelMode::Majority => {
                for t in 1..=traj.len() {
                    let label = majority_vote_label(&prompt, &traj.prefix(t), &policy, &correct, cfg.label.rollouts, seed, t - 1)?;
                    out.push(record(t, f64::from(label)));
                }
            }
            LabelMode::Direct => {
                for t in 1..=traj.len() {
                    out.push(record(t, f64::from(styled(&prompt, &traj.prefix(t)))));
                }
            }
            LabelMode::OutcomeBt => unreachable!("handled above"),
        }
    }
    Ok(out)
}

fn prefix_examples(tok: &TokenizerSpec, records: &[LabeledRecord]) -> Result<Vec<Vec<PrefixExample>>, HarnessError> {
    let mut groups: Vec<Vec<PrefixExample>> = Vec::new();
    let mut last_prompt: Option<&str> = None;
    for r in records {
        let prompt = tok.encode_prompt(&r.prompt)?;
        let prefix = tok.encode(&r.prefix_steps.concat())?;
        let ex = PrefixExample { prompt, prefix, target: r.label };
        let new_group = last_prompt != Some(r.prompt.as_str()) || r.prefix_steps.len() == 1;
        match groups.last_mut() {
            Some(g) if !new_group => g.push(ex),
            _ => groups.push(vec![ex]),
        }
        last_prompt = Some(&r.prompt);
    }
    Ok(groups)
}

/// Splits `items` into a training head and a held-out tail.
pub(crate) fn split_heldout<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let held = ((items.len() as f64) * fraction).round() as usize;
    let cut = items.len() - held.min(items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}

fn scored_pair(tok: &TokenizerSpec, p: &PreferencePair) -> Result<ScoredPair, HarnessError> {
    let mut chosen = tok.encode(&p.chosen)?;
    chosen.push(tok.eos());
    let mut rejected = tok.encode(&p.rejected)?;
    rejected.push(tok.eos());
    Ok(ScoredPair { prompt: tok.encode_prompt(&p.prompt)?, chosen, rejected })
}

fn reward_model(run: &RunDir, kind: RewardKind, policy: &PolicyModel, seed: u64) -> Result<RewardModel, HarnessError> {
    let tok = policy.tokenizer().clone();
    Ok(match run.cfg.prm_init {
        PrmInit::Policy => RewardModel::from_backbone(kind, policy.backbone.clone(), tok, seed),
        PrmInit::Random => RewardModel::new(kind, policy.dims(), tok, seed)?,
    })
}

/// Trains the step reward model of the configured label mode and an
/// outcome Bradley-Terry reward on the accuracy pairs.
pub fn prm_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    timed(run, Phase::TrainPrm, || {
        let cfg = &run.cfg;
        let seed = run.seed("prm");
        let policy = run.load_policy(Phase::Sft)?;
        let tok = policy.tokenizer().clone();
        let train_cfg = PrmTrainConfig { seed, ..cfg.prm_train.clone() };
        run.phase_dir(Phase::TrainPrm)?;
        let mut log = MetricsLog::new();
        let row = |m: &str, v: f64| run.row(Phase::TrainPrm, m, v, seed);

        let records: Vec<LabeledRecord> = read_records(&run.require(Phase::Label, "prm_labels.jsonl")?)?;
        if !records.is_empty() {
            let groups = prefix_examples(&tok, &records)?;
            let (train_g, held_g) = split_heldout(&groups, cfg.data.heldout_fraction);
            let (train, held): (Vec<_>, Vec<_>) = (train_g.concat(), held_g.concat());
            let (kind, metric) = match cfg.label.mode {
                LabelMode::Value => (RewardKind::ValueRegression, "mse"),
                _ => (RewardKind::BinaryClassifier, "accuracy"),
            };
            let mut rm = reward_model(run, kind, &policy, seed)?;
            let report = match kind {
                RewardKind::ValueRegression => train_value_prm(&mut rm, &train, &held, &train_cfg)?,
                _ => train_classifier_prm(&mut rm, &train, &held, &train_cfg)?,
            };
            rm.save(&run.path(Phase::TrainPrm, "reward.ckpt"))?;
            log.push(row(&format!("prm.train_{metric}"), report.train_metric))?;
            if !held.is_empty() {
                log.push(row(&format!("prm.heldout_{metric}"), report.heldout_metric))?;
                if kind == RewardKind::ValueRegression {
                    let mean = train.iter().map(|e| e.target).sum::<f64>() / train.len() as f64;
                    let var = held.iter().map(|e| (e.target - mean).powi(2)).sum::<f64>() / held.len() as f64;
                    log.push(row("prm.heldout_constant_mse", var))?;
                }
            }
            log.push(row("prm.examples", train.len() as f64))?;
        }

        let pairs: Vec<PreferencePair> = read_records(&run.require(Phase::Label, "pairs.jsonl")?)?;
        let acc_pairs: Vec<ScoredPair> = pairs
            .iter()
            .filter(|p| p.objective == ACCURACY_OBJECTIVE)
            .map(|p| scored_pair(&tok, p))
            .collect::<Result<_, _>>()?;
        if !acc_pairs.is_empty() {
            let (train, held) = split_heldout(&acc_pairs, cfg.data.heldout_fraction);
            let mut bt = reward_model(run, RewardKind::BradleyTerry, &policy, seed)?;
            let report = train_bt_reward(&mut bt, &train, &held, &train_cfg)?;
            bt.save(&run.path(Phase::TrainPrm, "bt.ckpt"))?;
            log.push(row("bt.train_ranking_accuracy", report.train_metric))?;
            if !held.is_empty() {
                log.push(row("bt.heldout_ranking_accuracy", report.heldout_metric))?;
            }
            log.push(row("bt.pairs", train.len() as f64))?;
        }
        run.write_metrics(Phase::TrainPrm, &log)?;
        Ok(log)
    })
}

/// Held-out split of preference pairs, taken per objective.
pub(crate) fn split_pairs(pairs: &[PreferencePair], heads: usize, fraction: f64) -> (Vec<PreferencePair>, Vec<PreferencePair>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for obj in 0..heads {
        let of: Vec<PreferencePair> = pairs.iter().filter(|p| p.objective == obj).cloned().collect();
        let (t, h) = split_heldout(&of, fraction);
        train.extend(t);
        held.extend(h);
    }
    (train, held)
}

/// Preference accuracy and mean margin of every head, and of the uniform
/// ensemble, on each objective's pairs.
pub(crate) fn preference_metrics(
    run: &RunDir,
    phase: Phase,
    model: &PolicyModel,
    pairs: &[PreferencePair],
    beta: f64,
    seed: u64,
) -> Result<Vec<MetricsRow>, HarnessError> {
    let heads = model.num_heads();
    let encoded = encode_pairs(model, pairs)?;
    let mut rows = Vec::new();
    let mut sources: Vec<(String, PolicyHead)> = (0..heads).map(|i| (format!("head{i}"), PolicyHead::Head(i))).collect();
    sources.push(("ensemble".into(), PolicyHead::Ensemble(vec![1.0 / heads as f64; heads])));
    for obj in 0..heads {
        let of: Vec<_> = encoded.iter().filter(|p| p.objective == obj).cloned().collect();
        if of.is_empty() {
            continue;
        }
        for (name, head) in &sources {
            let ev = evaluate_preferences(model, head, &of, beta)?;
            rows.push(run.row(phase, format!("{}.{name}.obj{obj}.accuracy", phase.name()), ev.accuracy, seed));
            rows.push(run.row(phase, format!("{}.{name}.obj{obj}.mean_delta", phase.name()), ev.mean_delta, seed));
        }
    }
    Ok(rows)
}

/// Multi-head DPO from the supervised policy.
pub fn train_mahdpo_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    timed(run, Phase::TrainMahdpo, || {
        let cfg = &run.cfg;
        let seed = run.seed("mahdpo");
        let heads = cfg.model.objective_heads;
        let mut model = run.load_policy(Phase::Sft)?.init_heads(cfg.train.perturb_scale, seed);
        let pairs: Vec<PreferencePair> = read_records(&run.require(Phase::Label, "pairs.jsonl")?)?;
        let (train, held) = split_pairs(&pairs, heads, cfg.data.heldout_fraction);
        run.phase_dir(Phase::TrainMahdpo)?;
        write_records(&run.path(Phase::TrainMahdpo, "heldout_pairs.jsonl"), &held)?;
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let report = train_mahdpo(&mut model, &train, &tcfg)?;
        report.write_csv(&run.path(Phase::TrainMahdpo, "train_log.csv"), heads)?;
        model.save(&run.path(Phase::TrainMahdpo, "policy.ckpt"))?;

        let mut log = MetricsLog::new();
        log.push(run.row(Phase::TrainMahdpo, "mahdpo.steps", report.log.len() as f64, seed))?;
        if let Some(last) = report.log.last() {
            log.push(run.row(Phase::TrainMahdpo, "mahdpo.final_loss", last.metrics.loss, seed))?;
        }
        log.push(run.row(Phase::TrainMahdpo, "mahdpo.train_pairs", train.len() as f64, seed))?;
        if !held.is_empty() {
            log.extend(preference_metrics(run, Phase::TrainMahdpo, &model, &held, cfg.train.beta, seed)?)?;
        }
        run.write_metrics(Phase::TrainMahdpo, &log)?;
        Ok(log)
    })
}

/// Scores a candidate step by whether it carries the style marker.
pub(crate) struct StyleScorer<'a> {
    pub tokenizer: &'a TokenizerSpec,
    pub marker: char,
}

impl StepScorer for StyleScorer<'_> {
    fn score_step(&self, _prompt: &[usize], _prefix: &[usize], candidate: &[usize]) -> Result<f64, crate::policy::ModelError> {
        Ok(f64::from(u8::from(self.tokenizer.decode(candidate).contains(self.marker))))
    }
}

/// One decoded evaluation response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub config: String,
    pub seed_index: usize,
    pub problem_id: usize,
    pub text: String,
    pub z: u8,
    pub style: u8,
    pub ledger: CostLedger,
}

/// Ledger of one decode call kept for the cost report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub problem_id: usize,
    pub mode: DecodeMode,
    pub k: usize,
    /// Fixed candidate length, when the boundary is a length cap.
    pub fixed_length: Option<usize>,
    pub response: Vec<usize>,
    pub ledger: CostLedger,
}

/// Decoding settings of one evaluated configuration.
pub(crate) struct DecodeJob<'a> {
    pub name: String,
    pub model: &'a PolicyModel,
    pub source: HeadSource,
    pub k: usize,
    pub scorer: Option<&'a dyn StepScorer>,
    pub mode: DecodeMode,
}

/// Decodes every problem under every evaluation seed. Problem `i` under seed
/// index `s` uses the same RNG seed in every configuration.
pub(crate) fn run_job(
    run: &RunDir,
    job: &DecodeJob<'_>,
    problems: &[ArithmeticProblem],
) -> Result<Vec<DecodeRecord>, HarnessError> {
    let cfg = &run.cfg;
    let tok = job.model.tokenizer();
    let mut out = Vec::with_capacity(problems.len() * cfg.eval_seeds);
    for s in 0..cfg.eval_seeds {
        let base = run.seed(&format!("eval.{s}"));
        for (i, p) in problems.iter().enumerate() {
            let dcfg = DecodeConfig {
                k: job.k,
                t_max: cfg.decode.t_max,
                chunk_cap: cfg.decode.chunk_cap,
                boundary: cfg.decode.boundary.criteria(tok),
                sampling: cfg.decode.sampling.clone(),
                seed: item_seed(base, i),
                mode: job.mode,
                source: job.source.clone(),
            };
            let prompt = tok.encode_prompt(&p.prompt())?;
            let o = decode(job.model, job.scorer, &prompt, &dcfg)?;
            let text = tok.decode(&o.response);
            out.push(DecodeRecord {
                config: job.name.clone(),
                seed_index: s,
                problem_id: i,
                z: verify(p, &text).z,
                style: cfg.style.judge(&text),
                text,
                ledger: o.ledger,
            });
        }
    }
    Ok(out)
}

/// Guidance scorer: accuracy and style scorers mixed by `weights`.
pub(crate) fn guidance<'a>(
    kind: ScorerKind,
    weights: &[f64],
    oracle: &'a OracleScorer,
    prm: Option<&'a RewardModel>,
    style: &'a StyleScorer<'a>,
) -> Result<Option<WeightedScorer<'a>>, HarnessError> {
    let accuracy: &dyn StepScorer = match kind {
        ScorerKind::None => return Ok(None),
        ScorerKind::Oracle => oracle,
        ScorerKind::Prm => prm.ok_or_else(|| HarnessError::MissingArtifact("prm/reward.ckpt".into()))?,
    };
    let w = |i: usize| weights.get(i).copied().unwrap_or(0.0);
    Ok(Some(WeightedScorer::new(vec![(w(0), accuracy), (w(1), style as &dyn StepScorer)])))
}

pub(crate) fn eval_problems(run: &RunDir) -> Vec<ArithmeticProblem> {
    gen_problems(run.seed("eval.problems"), run.cfg.data.eval_problems)
}

pub(crate) fn load_prm(run: &RunDir) -> Result<Option<RewardModel>, HarnessError> {
    let path = run.path(Phase::TrainPrm, "reward.ckpt");
    if run.cfg.decode.scorer == ScorerKind::Prm {
        return Ok(Some(RewardModel::load(&run.require(Phase::TrainPrm, "reward.ckpt")?)?));
    }
    Ok(if path.exists() { Some(RewardModel::load(&path)?) } else { None })
}

/// Number of evaluation problems also decoded in both modes for the cost
/// report.
const COST_PROBLEMS: usize = 16;

/// Guided decoding of the evaluation set with the trained policy, plus
/// paired cache-carry and re-encode runs for the cost report.
pub fn decode_phase(run: &RunDir) -> Result<MetricsLog, HarnessError> {
    timed(run, Phase::Decode, || {
        let cfg = &run.cfg;
        let seed = run.seed("decode");
        let model = run.load_policy(Phase::TrainMahdpo)?;
        let tok = model.tokenizer().clone();
        let prm = load_prm(run)?;
        let oracle = OracleScorer::new(tok.clone());
        let style = StyleScorer { tokenizer: &tok, marker: cfg.style.marker };
        let scorer = guidance(cfg.decode.scorer, &cfg.decode.weights, &oracle, prm.as_ref(), &style)?;
        let problems = eval_problems(run);
        run.phase_dir(Phase::Decode)?;
        write_records(&run.path(Phase::Decode, "problems.jsonl"), &problem_records(&problems))?;

        let job = DecodeJob {
            name: "policy.guided".into(),
            model: &model,
            source: HeadSource::Ensemble(cfg.decode.weights.clone()),
            k: cfg.decode.k,
            scorer: scorer.as_ref().map(|s| s as &dyn StepScorer),
            mode: cfg.decode.mode,
        };
        let outputs = run_job(run, &job, &problems)?;
        write_records(&run.path(Phase::Decode, "outputs.jsonl"), &outputs)?;

        let fixed_length = match cfg.decode.boundary {
            super::BoundarySpec::FixedLength(n) => Some(n),
            super::BoundarySpec::Separator => None,
        };
        let mut costs = Vec::new();
        let mut identical = true;
        let base = run.seed("eval.0");
        for (i, p) in problems.iter().take(COST_PROBLEMS).enumerate() {
            let prompt = tok.encode_prompt(&p.prompt())?;
            let mut responses = Vec::new();
            for mode in [DecodeMode::CacheCarry, DecodeMode::ReEncode] {
                let dcfg = DecodeConfig {
                    k: cfg.decode.k,
                    t_max: cfg.decode.t_max,
                    chunk_cap: cfg.decode.chunk_cap,
                    boundary: cfg.decode.boundary.criteria(&tok),
                    sampling: cfg.decode.sampling.clone(),
                    seed: item_seed(base, i),
                    mode,
                    source: job.source.clone(),
                };
                let o = decode(&model, job.scorer, &prompt, &dcfg)?;
                responses.push(o.response.clone());
                costs.push(CostRecord { problem_id: i, mode, k: cfg.decode.k, fixed_length, response: o.response, ledger: o.ledger });
            }
            identical &= responses[0] == responses[1];
        }
        write_records(&run.path(Phase::Decode, "ledgers.jsonl"), &costs)?;

        let mut log = MetricsLog::new();
        let row = |m: &str, v: f64| run.row(Phase::Decode, m, v, seed);
        let n = outputs.len() as f64;
        log.push(row("decode.accuracy", outputs.iter().map(|o| f64::from(o.z)).sum::<f64>() / n))?;
        log.push(row("decode.style_rate", outputs.iter().map(|o| f64::from(o.style)).sum::<f64>() / n))?;
        log.push(row("decode.token_forwards", outputs.iter().map(|o| o.ledger.token_forwards as f64).sum::<f64>()))?;
        log.push(row("decode.modes_identical", f64::from(u8::from(identical))))?;
        run.write_metrics(Phase::Decode, &log)?;
        Ok(log)
    })
}

/// Runs every phase in order.
pub fn run_pipeline(cfg: RunConfig) -> Result<RunDir, HarnessError> {
    let run = RunDir::create(cfg)?;
    sft_phase(&run)?;
    label_phase(&run)?;
    prm_phase(&run)?;
    train_mahdpo_phase(&run)?;
    decode_phase(&run)?;
    super::eval_phase(&run)?;
    Ok(run)
}

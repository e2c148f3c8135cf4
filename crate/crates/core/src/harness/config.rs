//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key below is
//! optional; unknown keys are rejected. Saving writes every key in a fixed
//! order, so save, load, save is byte-identical.
//!
//! | key | meaning |
//! |-----|---------|
//! | `task` | task name; only `arithmetic` |
//! | `seed` | master seed |
//! | `out_dir` | run directory |
//! | `model.hidden_dim`, `model.layers`, `model.attn_heads`, `model.max_positions`, `model.objective_heads` | policy shape |
//! | `data.sft_problems` | supervised corpus size |
//! | `data.pair_problems`, `data.pair_rollouts` | preference-pair sampling |
//! | `data.prm_problems` | trajectories labeled for the value PRM |
//! | `data.eval_problems` | evaluation set size |
//! | `data.heldout_fraction` | share of pairs and PRM data held out |
//! | `style.marker`, `style.threshold` | style judge |
//! | `sft.lr`, `sft.batch_size`, `sft.epochs`, `sft.final_lr_fraction` | supervised warm-up |
//! | `prm.gamma`, `prm.rollouts`, `prm.max_steps`, `prm.mode` | step labeling |
//! | `prm.lr`, `prm.batch_size`, `prm.epochs` | reward-model training |
//! | `prm.init` | `policy` (start from the SFT backbone) or `random` |
//! | `train.beta`, `train.alpha`, `train.lr`, `train.batch_size`, `train.epochs`, `train.balanced`, `train.perturb_scale`, `train.grad_clip` | MAH-DPO |
//! | `decode.k`, `decode.t_max`, `decode.chunk_cap`, `decode.boundary`, `decode.mode` | guided decoding |
//! | `decode.temperature`, `decode.top_p`, `decode.top_k` | sampling |
//! | `decode.weights` | head mixture used for decoding |
//! | `decode.scorer` | `oracle`, `prm` or `none` |
//! | `eval.seeds` | evaluation repetitions |
//! | `eval.sweep` | weight grid, `;`-separated weight vectors |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::decode::{BoundaryCriteria, DecodeMode, SamplingConfig};
use crate::mahdpo::{SftConfig, TrainConfig};
use crate::policy::{ModelDims, TokenizerSpec};
use crate::prmlab::{LabelMode, PrmLabelConfig, PrmTrainConfig};
use crate::synthtasks::StyleJudgeSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundarySpec {
    Separator,
    FixedLength(usize),
}

impl BoundarySpec {
    pub fn criteria(&self, tok: &TokenizerSpec) -> BoundaryCriteria {
        match self {
            BoundarySpec::Separator => BoundaryCriteria::Separator(tok.separator()),
            BoundarySpec::FixedLength(n) => BoundaryCriteria::FixedLength(*n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Oracle,
    Prm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrmInit {
    Policy,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub sft_problems: usize,
    pub pair_problems: usize,
    pub pair_rollouts: usize,
    pub prm_problems: usize,
    pub eval_problems: usize,
    pub heldout_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub k: usize,
    pub t_max: usize,
    pub chunk_cap: usize,
    pub boundary: BoundarySpec,
    pub mode: DecodeMode,
    pub sampling: SamplingConfig,
    pub weights: Vec<f64>,
    pub scorer: ScorerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelDims,
    pub data: DataConfig,
    pub style: StyleJudgeSpec,
    pub sft: SftConfig,
    pub label: PrmLabelConfig,
    pub prm_train: PrmTrainConfig,
    pub prm_init: PrmInit,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub eval_seeds: usize,
    pub eval_sweep: Vec<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "arithmetic".into(),
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            model: ModelDims { hidden_dim: 48, layers: 2, attn_heads: 2, max_positions: 96, objective_heads: 2, ..Default::default() },
            data: DataConfig {
                sft_problems: 2000,
                pair_problems: 8000,
                pair_rollouts: 10,
                prm_problems: 600,
                eval_problems: 500,
                heldout_fraction: 0.2,
            },
            style: StyleJudgeSpec::default(),
            sft: SftConfig { lr: 3e-3, batch_size: 16, epochs: 30, seed: 0, grad_clip: 1.0, final_lr_fraction: 1.0 },
            label: PrmLabelConfig::default(),
            prm_train: PrmTrainConfig { lr: 3e-4, batch_size: 8, epochs: 8, seed: 0, grad_clip: 1.0 },
            prm_init: PrmInit::Policy,
            train: TrainConfig { lr: 1e-4, batch_size: 16, epochs: 4, beta: 0.5, ..Default::default() },
            decode: DecodeSettings {
                k: 5,
                t_max: 80,
                chunk_cap: 16,
                boundary: BoundarySpec::Separator,
                mode: DecodeMode::CacheCarry,
                sampling: SamplingConfig::default(),
                weights: vec![0.5, 0.5],
                scorer: ScorerKind::Oracle,
            },
            eval_seeds: 3,
            eval_sweep: vec![vec![1.0, 0.0], vec![0.75, 0.25], vec![0.5, 0.5], vec![0.25, 0.75], vec![0.0, 1.0]],
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, v, e))
}

fn floats(key: &str, v: &str) -> Result<Vec<f64>, HarnessError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn flag(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        match key {
            "task" => self.task = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "model.hidden_dim" => self.model.hidden_dim = num(key, v)?,
            "model.layers" => self.model.layers = num(key, v)?,
            "model.attn_heads" => self.model.attn_heads = num(key, v)?,
            "model.max_positions" => self.model.max_positions = num(key, v)?,
            "model.objective_heads" => self.model.objective_heads = num(key, v)?,
            "data.sft_problems" => self.data.sft_problems = num(key, v)?,
            "data.pair_problems" => self.data.pair_problems = num(key, v)?,
            "data.pair_rollouts" => self.data.pair_rollouts = num(key, v)?,
            "data.prm_problems" => self.data.prm_problems = num(key, v)?,
            "data.eval_problems" => self.data.eval_problems = num(key, v)?,
            "data.heldout_fraction" => self.data.heldout_fraction = num(key, v)?,
            "style.marker" => {
                let mut chars = v.chars();
                self.style.marker = match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ => return Err(bad(key, v, "expected one character")),
                }
            }
            "style.threshold" => self.style.threshold = num(key, v)?,
            "sft.lr" => self.sft.lr = num(key, v)?,
            "sft.batch_size" => self.sft.batch_size = num(key, v)?,
            "sft.epochs" => self.sft.epochs = num(key, v)?,
            "sft.final_lr_fraction" => self.sft.final_lr_fraction = num(key, v)?,
            "prm.gamma" => self.label.gamma = num(key, v)?,
            "prm.rollouts" => self.label.rollouts = num(key, v)?,
            "prm.max_steps" => self.label.max_steps = num(key, v)?,
            "prm.mode" => self.label.mode = v.parse::<LabelMode>().map_err(|e| bad(key, v, e))?,
            "prm.lr" => self.prm_train.lr = num(key, v)?,
            "prm.batch_size" => self.prm_train.batch_size = num(key, v)?,
            "prm.epochs" => self.prm_train.epochs = num(key, v)?,
            "prm.init" => {
                self.prm_init = match v {
                    "policy" => PrmInit::Policy,
                    "random" => PrmInit::Random,
                    _ => return Err(bad(key, v, "expected policy or random")),
                }
            }
            "train.beta" => self.train.beta = num(key, v)?,
            "train.alpha" => self.train.alpha = floats(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.balanced" => self.train.balanced_batching = flag(key, v)?,
            "train.perturb_scale" => self.train.perturb_scale = num(key, v)?,
            "train.grad_clip" => self.train.grad_clip = num(key, v)?,
            "decode.k" => self.decode.k = num(key, v)?,
            "decode.t_max" => self.decode.t_max = num(key, v)?,
            "decode.chunk_cap" => self.decode.chunk_cap = num(key, v)?,
            "decode.boundary" => {
                self.decode.boundary = match v {
                    "separator" => BoundarySpec::Separator,
                    _ => match v.strip_prefix("fixed:") {
                        Some(n) => BoundarySpec::FixedLength(num(key, n)?),
                        None => return Err(bad(key, v, "expected separator or fixed:N")),
                    },
                }
            }
            "decode.mode" => self.decode.mode = v.parse().map_err(|e| bad(key, v, e))?,
            "decode.temperature" => self.decode.sampling.temperature = num(key, v)?,
            "decode.top_p" => self.decode.sampling.top_p = num(key, v)?,
            "decode.top_k" => self.decode.sampling.top_k = num(key, v)?,
            "decode.weights" => self.decode.weights = floats(key, v)?,
            "decode.scorer" => {
                self.decode.scorer = match v {
                    "oracle" => ScorerKind::Oracle,
                    "prm" => ScorerKind::Prm,
                    "none" => ScorerKind::None,
                    _ => return Err(bad(key, v, "expected oracle, prm or none")),
                }
            }
            "eval.seeds" => self.eval_seeds = num(key, v)?,
            "eval.sweep" => {
                self.eval_sweep = v.split(';').map(|w| floats(key, w.trim())).collect::<Result<_, _>>()?;
            }
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.task != "arithmetic" {
            return Err(HarnessError::Config(format!("unknown task {:?}", self.task)));
        }
        self.model.validate()?;
        let heads = self.model.objective_heads;
        self.train.validate(heads)?;
        self.label.validate()?;
        self.style.validate()?;
        self.decode.sampling.validate()?;
        crate::policy::check_simplex(&self.decode.weights, heads)?;
        for w in &self.eval_sweep {
            crate::policy::check_simplex(w, heads)?;
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(HarnessError::Config("data.heldout_fraction must lie in [0, 1)".into()));
        }
        if self.data.eval_problems == 0 {
            return Err(HarnessError::Config("the evaluation set is empty".into()));
        }
        if self.data.pair_rollouts < 2 {
            return Err(HarnessError::Config("pair construction needs at least 2 rollouts".into()));
        }
        if self.decode.k == 0 || self.decode.chunk_cap == 0 || self.decode.chunk_cap > self.decode.t_max {
            return Err(HarnessError::Config("decode needs k >= 1 and 1 <= chunk_cap <= t_max".into()));
        }
        if self.eval_seeds == 0 {
            return Err(HarnessError::Config("eval.seeds must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.clone());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("model.hidden_dim", self.model.hidden_dim.to_string());
        put("model.layers", self.model.layers.to_string());
        put("model.attn_heads", self.model.attn_heads.to_string());
        put("model.max_positions", self.model.max_positions.to_string());
        put("model.objective_heads", self.model.objective_heads.to_string());
        put("data.sft_problems", self.data.sft_problems.to_string());
        put("data.pair_problems", self.data.pair_problems.to_string());
        put("data.pair_rollouts", self.data.pair_rollouts.to_string());
        put("data.prm_problems", self.data.prm_problems.to_string());
        put("data.eval_problems", self.data.eval_problems.to_string());
        put("data.heldout_fraction", self.data.heldout_fraction.to_string());
        put("style.marker", self.style.marker.to_string());
        put("style.threshold", self.style.threshold.to_string());
        put("sft.lr", self.sft.lr.to_string());
        put("sft.batch_size", self.sft.batch_size.to_string());
        put("sft.epochs", self.sft.epochs.to_string());
        put("sft.final_lr_fraction", self.sft.final_lr_fraction.to_string());
        put("prm.gamma", self.label.gamma.to_string());
        put("prm.rollouts", self.label.rollouts.to_string());
        put("prm.max_steps", self.label.max_steps.to_string());
        put("prm.mode", self.label.mode.to_string());
        put("prm.lr", self.prm_train.lr.to_string());
        put("prm.batch_size", self.prm_train.batch_size.to_string());
        put("prm.epochs", self.prm_train.epochs.to_string());
        put(
            "prm.init",
            match self.prm_init {
                PrmInit::Policy => "policy",
                PrmInit::Random => "random",
            }
            .into(),
        );
        put("train.beta", self.train.beta.to_string());
        put("train.alpha", join(&self.train.alpha));
        put("train.lr", self.train.lr.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.balanced", self.train.balanced_batching.to_string());
        put("train.perturb_scale", self.train.perturb_scale.to_string());
        put("train.grad_clip", self.train.grad_clip.to_string());
        put("decode.k", self.decode.k.to_string());
        put("decode.t_max", self.decode.t_max.to_string());
        put("decode.chunk_cap", self.decode.chunk_cap.to_string());
        put(
            "decode.boundary",
            match self.decode.boundary {
                BoundarySpec::Separator => "separator".into(),
                BoundarySpec::FixedLength(n) => format!("fixed:{n}"),
            },
        );
        put("decode.mode", self.decode.mode.to_string());
        put("decode.temperature", self.decode.sampling.temperature.to_string());
        put("decode.top_p", self.decode.sampling.top_p.to_string());
        put("decode.top_k", self.decode.sampling.top_k.to_string());
        put("decode.weights", join(&self.decode.weights));
        put(
            "decode.scorer",
            match self.decode.scorer {
                ScorerKind::Oracle => "oracle",
                ScorerKind::Prm => "prm",
                ScorerKind::None => "none",
            }
            .into(),
        );
        put("eval.seeds", self.eval_seeds.to_string());
        put("eval.sweep", self.eval_sweep.iter().map(|w| join(w)).collect::<Vec<_>>().join(";"));
        s
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_text()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_byte_identically() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let err = RunConfig::parse("seed = 3\nmodel.width = 4\n").unwrap_err();
        assert!(err.to_string().contains("model.width"));
    }

    #[test]
    fn values_are_checked() {
        assert!(RunConfig::parse("decode.weights = 0.7,0.7").is_err());
        assert!(RunConfig::parse("decode.boundary = fixed:x").is_err());
        assert!(RunConfig::parse("style.marker = !!").is_err());
        assert!(RunConfig::parse("data.eval_problems = 0").is_err());
        let c = RunConfig::parse("# comment\n\ndecode.boundary = fixed:12\ntrain.alpha = 0.3,0.7\n").unwrap();
        assert_eq!(c.decode.boundary, BoundarySpec::FixedLength(12));
        assert_eq!(c.train.alpha, vec![0.3, 0.7]);
    }
}

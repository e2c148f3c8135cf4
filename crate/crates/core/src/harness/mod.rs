//! Run configuration, the phase pipeline, evaluation and reports.
//!
//! A run lives in one directory:
//!
//! ```text
//! <out>/config.txt          canonical copy of the run configuration
//! <out>/metrics.csv         every phase's metrics, in phase order
//! <out>/timings.csv         wall-clock seconds per phase
//! <out>/sft/                policy.ckpt, problems.jsonl, metrics.csv
//! <out>/label/              rollouts.jsonl, pairs.jsonl, prm_labels.jsonl, metrics.csv
//! <out>/prm/                reward.ckpt, metrics.csv
//! <out>/mahdpo/             policy.ckpt, train_log.csv, heldout_pairs.jsonl, metrics.csv
//! <out>/decode/             problems.jsonl, outputs.jsonl, ledgers.jsonl, metrics.csv
//! <out>/eval/               metrics.csv
//! ```
//!
//! All paths inside a run are relative to its directory.

mod config;
mod cost;
mod eval;
mod gradcheck;
mod metrics;
mod pipeline;

pub use config::{BoundarySpec, DataConfig, DecodeSettings, PrmInit, RunConfig, ScorerKind};
pub use cost::{cost_report, CostRow};
pub use eval::{eval_phase, EvalSummary};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use metrics::{mean_std, timings_csv, MetricsLog, MetricsRow, TimingRow, METRICS_HEADER, TIMINGS_HEADER};
pub use pipeline::{
    decode_phase, label_phase, prm_phase, run_pipeline, sft_phase, train_mahdpo_phase, CostRecord, DecodeRecord, Phase, RunDir,
};

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::DecodeError;
use crate::mahdpo::TrainError;
use crate::numcore::NumError;
use crate::policy::ModelError;
use crate::prmlab::PrmError;
use crate::synthtasks::TaskError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("io: {0}")]
    Io(String),
    #[error("missing artifact {0}; run the earlier phases first")]
    MissingArtifact(String),
    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("cost report: {0}")]
    Cost(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prm(#[from] PrmError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io(format!("{}: {e}", path.display()))
    }
}

/// Seed of a named phase: the first 8 bytes of SHA-256 over the master seed
/// and the name. Adding phases never changes the seeds of existing ones.
pub fn phase_seed(master: u64, phase: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(phase.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Short identifier of a run: hex prefix of SHA-256 over the canonical
/// config text with the output directory blanked, so relocated runs keep
/// their id.
pub fn run_id(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = Default::default();
    let d = Sha256::digest(c.to_text().as_bytes());
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_seeds_are_stable_and_distinct() {
        assert_eq!(phase_seed(7, "sft"), phase_seed(7, "sft"));
        assert_ne!(phase_seed(7, "sft"), phase_seed(7, "label"));
        assert_ne!(phase_seed(7, "sft"), phase_seed(8, "sft"));
    }

    #[test]
    fn run_id_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_eq!(run_id(&a).len(), 12);
        assert_ne!(run_id(&a), run_id(&b));
    }
}

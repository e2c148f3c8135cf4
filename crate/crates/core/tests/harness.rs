use std::path::Path;

use moalign::harness::{
    cost_report, file_sha256, run_id, run_pipeline, CostRecord, MetricsLog, Phase, RunConfig, RunDir, METRICS_HEADER,
};
use moalign::synthtasks::read_jsonl;

fn tiny(out: &Path) -> RunConfig {
    let text = format!(
        "out_dir = {}
seed = 11
model.hidden_dim = 8
model.layers = 1
data.sft_problems = 40
data.pair_problems = 12
data.pair_rollouts = 4
data.prm_problems = 6
data.eval_problems = 6
prm.rollouts = 2
sft.epochs = 2
prm.epochs = 1
train.epochs = 1
decode.k = 2
decode.t_max = 40
eval.seeds = 2
eval.sweep = 1,0;0,1
",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn pipeline_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(tiny(&dir.path().join("a"))).unwrap();
    let b = run_pipeline(tiny(&dir.path().join("b"))).unwrap();
    assert_eq!(a.run_id, b.run_id);
    assert_eq!(a.run_id, run_id(&a.cfg));
    let ma = file_sha256(&a.root.join("metrics.csv")).unwrap();
    let mb = file_sha256(&b.root.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);

    for phase in Phase::ALL {
        assert!(a.path(phase, "metrics.csv").exists(), "{}", phase.name());
    }
    for file in ["sft/policy.ckpt", "label/pairs.jsonl", "prm/reward.ckpt", "mahdpo/train_log.csv", "decode/ledgers.jsonl"] {
        assert!(a.root.join(file).exists(), "{file}");
    }
    let text = std::fs::read_to_string(a.root.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    let log = MetricsLog::parse_csv(&text).unwrap();
    for m in ["sft.loss", "eval.base.guided.accuracy.mean", "eval.sweep1.style.mean", "decode.modes_identical"] {
        assert!(log.get(m).is_some(), "{m} missing");
    }
    assert_eq!(log.get("decode.modes_identical"), Some(1.0));
    let timings = std::fs::read_to_string(a.root.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 1 + Phase::ALL.len());

    let records: Vec<CostRecord> = read_jsonl(&a.path(Phase::Decode, "ledgers.jsonl")).unwrap();
    let (rows, table) = cost_report(&records).unwrap();
    assert!(!rows.is_empty());
    assert!(table.contains("ratio"));

    let saved = RunConfig::load(&a.root.join("config.txt")).unwrap();
    assert_eq!(saved, a.cfg);
}

#[test]
fn phases_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(tiny(&dir.path().join("r"))).unwrap();
    let err = moalign::harness::train_mahdpo_phase(&run).unwrap_err();
    assert!(err.to_string().contains("missing artifact"), "{err}");
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use moalign::harness::{
    cost_report, decode_phase, eval_phase, gradcheck, label_phase, prm_phase, run_pipeline, sft_phase,
    train_mahdpo_phase, GradcheckConfig, MetricsLog, Phase, RunConfig, RunDir,
};
use moalign::synthtasks::read_jsonl;

/// Multi-objective alignment pipeline on synthetic arithmetic.
///
/// Log verbosity follows the MOALIGN_LOG environment variable
/// (error, warn, info, debug, trace); the default is info.
#[derive(Parser)]
#[command(name = "moalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sft, label, train-prm, train-mahdpo, decode and eval in order.
    Pipeline(RunArgs),
    /// Supervised warm-up of the policy.
    Sft(RunArgs),
    /// Sample rollouts, build preference pairs and label step prefixes.
    Label(RunArgs),
    /// Train the step reward model and the outcome reward.
    TrainPrm(RunArgs),
    /// Multi-head preference optimization.
    TrainMahdpo(RunArgs),
    /// Guided decoding of the evaluation set.
    Decode(RunArgs),
    /// Evaluate every decode configuration over the evaluation seeds.
    Eval(RunArgs),
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measured and predicted token-forward counts of a decode phase.
    CostReport(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoding mode: cache-carry or re-encode.
    #[arg(long)]
    mode: Option<String>,
    /// Candidates per decoding step.
    #[arg(long)]
    k: Option<usize>,
    /// Head weights, comma-separated.
    #[arg(long)]
    weights: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = &self.mode {
            cfg.set("decode.mode", m)?;
        }
        if let Some(k) = self.k {
            cfg.decode.k = k;
        }
        if let Some(w) = &self.weights {
            cfg.set("decode.weights", w)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_metrics(log: &MetricsLog) {
    for r in log.rows() {
        println!("{:<44} {:.6}", r.metric, r.value);
    }
}

fn run(cli: Cli) -> Result<()> {
    let phase = |args: &RunArgs, f: fn(&RunDir) -> Result<MetricsLog, moalign::harness::HarnessError>| -> Result<()> {
        let run = RunDir::create(args.config()?)?;
        print_metrics(&f(&run)?);
        Ok(())
    };
    match cli.command {
        Command::Pipeline(args) => {
            let run = run_pipeline(args.config()?)?;
            print_metrics(&run.metrics()?);
            println!("artifacts in {}", run.root.display());
        }
        Command::Sft(args) => phase(&args, sft_phase)?,
        Command::Label(args) => phase(&args, label_phase)?,
        Command::TrainPrm(args) => phase(&args, prm_phase)?,
        Command::TrainMahdpo(args) => phase(&args, train_mahdpo_phase)?,
        Command::Decode(args) => phase(&args, decode_phase)?,
        Command::Eval(args) => phase(&args, eval_phase)?,
        Command::Gradcheck { seed } => {
            let start = std::time::Instant::now();
            let report = gradcheck(&GradcheckConfig { seed, ..Default::default() })?;
            print!("{}", report.render());
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::CostReport(args) => {
            let cfg = args.config()?;
            let path = cfg.out_dir.join(Phase::Decode.name()).join("ledgers.jsonl");
            let records = read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
            let (_, table) = cost_report(&records)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOALIGN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `campaign`: run, compare and replay differential fuzzing campaigns.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphmut::campaign::ablation::run_ablation;
use graphmut::campaign::replay::replay;
use graphmut::campaign::{run_campaign, CampaignConfig, CampaignReport};
use graphmut::scheduler::Strategy;

/// Exit status when a campaign reports defects.
const DEFECTS_FOUND: u8 = 2;

#[derive(Parser)]
#[command(name = "campaign", version, about = "Differential mutation fuzzing of graph executors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one campaign and write report.json plus the models it references.
    Run(RunArgs),
    /// Compare strategies over repeated mutation loops.
    Ablate(AblateArgs),
    /// Re-run the check behind one recorded defect.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Arm a fault on backend B, in addition to those in the config.
    #[arg(long = "arm-fault")]
    arm_fault: Vec<String>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated strategies, e.g. `double-q,mcmc,random`.
    #[arg(long, value_delimiter = ',', default_value = "double-q,mcmc,random")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Write ablation.json here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A report.json written by `campaign run`; models are read beside it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    defect: usize,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load_config(path: &Path) -> Result<CampaignConfig, Failure> {
    CampaignConfig::from_file(path).map_err(|e| Failure::Config(e.into()))
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = args.rounds {
        cfg.rounds = n;
    }
    if let Some(k) = args.top_k {
        cfg.top_k = k;
    }
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    for f in args.arm_fault {
        if !cfg.arm_faults.contains(&f) {
            cfg.arm_faults.push(f);
        }
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let report = run_campaign(&cfg).map_err(|e| Failure::Config(e.into()))?;
    report
        .write(&out)
        .with_context(|| format!("writing report to {}", out.display()))
        .map_err(Failure::Runtime)?;
    println!(
        "{} rounds, legal rate {:.3}, {} defects, report at {}",
        report.rounds.len(),
        report.legal_rate,
        report.defects.len(),
        out.join("report.json").display()
    );
    for (family, n) in &report.counts.by_family {
        println!("  {family}: {n}");
    }
    Ok(if report.defects.is_empty() { 0 } else { DEFECTS_FOUND })
}

fn ablate(args: AblateArgs) -> Result<u8, Failure> {
    let cfg = load_config(&args.config)?;
    let report = run_ablation(&cfg, &args.strategies, args.repetitions).map_err(|e| Failure::Config(e.into()))?;
    for s in &report.summary {
        println!(
            "{:<9} median legal rate {:.3}, mean generation {:.2} ms per legal model",
            s.strategy.to_string(),
            s.median_legal_rate,
            s.mean_generation_ms_per_legal
        );
    }
    let json = serde_json::to_string_pretty(&report).expect("ablation report serializes");
    match args.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::write(dir.join("ablation.json"), json))
                .with_context(|| format!("writing {}", dir.display()))
                .map_err(Failure::Runtime)?;
        }
        None => println!("{json}"),
    }
    Ok(0)
}

fn replay_cmd(args: ReplayArgs) -> Result<u8, Failure> {
    let inner = || -> Result<u8> {
        let text = std::fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
        let report = CampaignReport::from_json(&text).context("parsing report")?;
        let dir = args.report.parent().unwrap_or(Path::new("."));
        let out = replay(&report, dir, args.defect)?;
        println!("{}", serde_json::to_string_pretty(&out)?);
        if !out.reproduced {
            bail!("defect {} did not reproduce", args.defect);
        }
        Ok(0)
    };
    inner().map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Replay(a) => replay_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

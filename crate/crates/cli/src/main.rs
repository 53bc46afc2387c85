use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use slowfast_core::bench::{
    self, audit_budget_row, emit_token_table, frames_under_budget, known_profiles, profile_by_name,
    published_budget_rows, strategy_ratio, SuiteConfig,
};
use slowfast_core::compressors::{write_checkpoint, CompressorSpec};
use slowfast_core::pipeline::strategy_token_count;
use slowfast_core::synth::TaskKind;
use slowfast_core::training::{grad_check_model, run_staging_ablation, GradCheckOptions, StagingSetup};
use slowfast_core::{Error, Result};

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Slow-fast video token compression bench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokens per video and compression ratio for each strategy.
    Tokens {
        /// Video length in frames; overrides `frames` from the config.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Maximal frame counts under the configured token budgets.
    Budget {
        /// Restrict to one model profile.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Strategy ablation: compression ratios plus trained accuracies.
    Ablate,
    /// Baseline vs direct vs two-stage training over the configured seeds.
    Train {
        #[arg(long, default_value = "change-direction")]
        task: TaskKind,
    },
    /// Finite-difference check of every strategy's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Token totals per model profile and an audit of published budget rows.
    Report {
        /// Frame counts to tabulate.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,96,128")]
        frames: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Tokens { .. } => "tokens",
            Command::Budget { .. } => "budget",
            Command::Ablate => "ablate",
            Command::Train { .. } => "train",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report { .. } => "report",
        }
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    write(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Outcome of a subcommand that ran to completion; `false` means a
/// self-check failed.
type Passed = bool;

fn tokens(cfg: &SuiteConfig, out: &Path, frames: usize) -> Result<Passed> {
    let mut csv = String::from("strategy,frames,tokens,compression_ratio,compression_display\n");
    let mut rows = Vec::new();
    for &s in &cfg.strategies {
        let n = strategy_token_count(s, frames, cfg.token_grid);
        let cr = strategy_ratio(s, cfg.token_grid)?;
        csv.push_str(&format!("{s},{frames},{n},{},{cr}\n", cr.value));
        rows.push(json!({
            "strategy": s, "frames": frames, "tokens": n,
            "compression_ratio": cr.value, "compression_display": cr.to_string(),
        }));
    }
    print!("{csv}");
    write(out, "tokens.csv", &csv)?;
    write_json(
        out,
        "tokens.json",
        &json!({ "version": bench::REPORT_VERSION, "token_grid": cfg.token_grid, "rows": rows }),
    )?;
    Ok(true)
}

fn budget(cfg: &SuiteConfig, out: &Path, profile: Option<&str>) -> Result<Passed> {
    let profiles = match profile {
        Some(name) => vec![profile_by_name(name)?],
        None => known_profiles(),
    };
    let mut csv = String::from("profile,budget,frames,tokens\n");
    let mut reports = Vec::new();
    for p in &profiles {
        for &b in &cfg.budgets {
            match frames_under_budget(p, b) {
                Ok(r) => {
                    csv.push_str(&format!("{},{},{},{}\n", p.name, r.budget, r.frames, r.tokens));
                    reports.push(r);
                }
                Err(e) if profile.is_none() => eprintln!("skipping {}: {e}", p.name),
                Err(e) => return Err(e),
            }
        }
    }
    let audits = published_budget_rows()
        .iter()
        .filter(|r| profile.is_none_or(|p| p == r.profile))
        .map(audit_budget_row)
        .collect::<Result<Vec<_>>>()?;
    for a in audits.iter().filter(|a| a.discrepancy) {
        eprintln!(
            "discrepancy: {} under {} tokens is published at {} frames ({} tokens), computed {} frames; \
             consistent if the budget is read as a rounded label: {}",
            a.published.profile,
            a.published.budget,
            a.published.frames,
            a.published_cost,
            a.computed.frames,
            a.rounded_agrees
        );
    }
    print!("{csv}");
    write(out, "budget.csv", &csv)?;
    write_json(
        out,
        "budget.json",
        &json!({ "version": bench::REPORT_VERSION, "reports": reports, "published_audit": audits }),
    )?;
    Ok(true)
}

fn ablate(cfg: &SuiteConfig, out: &Path) -> Result<Passed> {
    let report = bench::run_ablation_suite(cfg, out)?;
    print!("{}", report.to_csv());
    Ok(true)
}

fn train(cfg: &SuiteConfig, out: &Path, task: TaskKind) -> Result<Passed> {
    let table = run_staging_ablation(&cfg.seed_list(), task, &cfg.experiment(task))?;
    print!("{}", table.to_csv());
    write(out, "staging.csv", &table.to_csv())?;
    write_json(
        out,
        "staging.json",
        &json!({ "version": bench::REPORT_VERSION, "table": table }),
    )?;
    if let Some(row) = table.row(StagingSetup::TwoStage) {
        for (run, model) in row.runs.iter().zip(&row.models) {
            write_checkpoint(&out.join(format!("two-stage-seed{}.sfp", run.seed)), model)?;
        }
    }
    Ok(true)
}

fn gradcheck(cfg: &SuiteConfig, out: &Path, tolerance: f64) -> Result<Passed> {
    let mut reports = Vec::new();
    let mut passed = true;
    for &s in &cfg.strategies {
        let spec = CompressorSpec::new(s, cfg.grid).with_heads(cfg.heads);
        let opts = GradCheckOptions {
            tolerance,
            seed: cfg.seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check_model(&spec, cfg.grid, cfg.channels, &opts)?;
        for e in &report.entries {
            println!(
                "{s} {} {:.3e} {}",
                e.name,
                e.max_relative_error,
                if e.passed { "ok" } else { "FAIL" }
            );
        }
        passed &= report.passed();
        reports.push(report);
    }
    write_json(
        out,
        "gradcheck.json",
        &json!({ "version": bench::REPORT_VERSION, "passed": passed, "reports": reports }),
    )?;
    Ok(passed)
}

fn report(out: &Path, frames: &[usize], budgets: &[usize]) -> Result<Passed> {
    let rows = emit_token_table(&known_profiles(), frames, budgets);
    let csv = bench::token_table_csv(&rows);
    print!("{csv}");
    write(out, "token_table.csv", &csv)?;
    let audits = published_budget_rows()
        .iter()
        .map(audit_budget_row)
        .collect::<Result<Vec<_>>>()?;
    write_json(
        out,
        "report.json",
        &json!({ "version": bench::REPORT_VERSION, "token_table": rows, "published_audit": audits }),
    )?;
    Ok(true)
}

fn run(cli: Cli) -> Result<Passed> {
    let mut cfg = match &cli.common.config {
        Some(path) => SuiteConfig::load(path)?,
        None => SuiteConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()));
    match cli.command {
        Command::Tokens { frames } => tokens(&cfg, &out, frames.unwrap_or(cfg.frames)),
        Command::Budget { profile } => budget(&cfg, &out, profile.as_deref()),
        Command::Ablate => ablate(&cfg, &out),
        Command::Train { task } => train(&cfg, &out, task),
        Command::Gradcheck { tolerance } => gradcheck(&cfg, &out, tolerance),
        Command::Report { frames } => report(&out, &frames, &cfg.budgets),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("self-check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() || matches!(e, Error::Io(_) | Error::Json(_)) { 1 } else { 2 })
        }
    }
}

//! Command-line runner: one subcommand per attack, plus `theorems` and `all`.
//!
//! Exit codes: 0 on success, 2 on usage or config errors, 1 when a run hits
//! an internal invariant violation (or, with `--strict`, a failing check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use x402_testbed::exec::trial_seed;
use x402_testbed::harness::attacks::{attack4_report, parties, revert_trial, Scenario};
use x402_testbed::harness::{
    run_attack_1a, run_attack_1b, run_attack_2, run_attack_3, run_attack_4, validate_theorems, ExperimentConfig,
    ExperimentReport, HarnessError,
};
use x402_testbed::server::ExecutionPolicy;

const MANIFEST_SCHEMA: &str = "x402-testbed.manifest.v1";

#[derive(Parser, Debug)]
#[command(name = "x402-testbed", version, about = "Discrete-event attack testbed for HTTP 402 payments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed. Trial i runs with `seed ^ i`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides every trial and repetition count.
    #[arg(long, global = true)]
    trials: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Exit 1 when any report check fails.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Revert-grant exposure of optimistic execution.
    Attack1a {
        /// Also write the first N single-payment traces of the first grid cell.
        #[arg(long, default_value_t = 0)]
        trace_samples: u64,
    },
    /// Settlement preemption.
    Attack1b,
    /// Payment replay.
    Attack2,
    /// Proxy caching and header mutation.
    Attack3,
    /// Discovery manipulation.
    Attack4,
    /// Bound checks.
    Theorems,
    /// Every attack and the bound checks.
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    path: String,
    kind: &'static str,
    attack: Option<String>,
}

#[derive(Debug, Serialize)]
struct RunStats {
    reports: usize,
    rows: usize,
    checks: usize,
    checks_failed: usize,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    schema: &'static str,
    tool_version: &'static str,
    command_line: Vec<String>,
    subcommand: String,
    format: Format,
    seed: u64,
    config: ExperimentConfig,
    stats: RunStats,
    outputs: Vec<OutputEntry>,
}

/// A failure classified by exit code.
enum Failure {
    Config(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Config(e.into()),
            HarnessError::Invariant(_) => Failure::Internal(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(Failure::Config)?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    if let Some(n) = cli.trials {
        if n == 0 {
            return Err(Failure::Config(anyhow::anyhow!("--trials must be positive")));
        }
        cfg = cfg.with_trials(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Writer<'a> {
    dir: &'a Path,
    format: Format,
    outputs: Vec<OutputEntry>,
    reports: Vec<ExperimentReport>,
}

impl Writer<'_> {
    fn report(&mut self, rep: ExperimentReport) -> anyhow::Result<()> {
        let stem = format!("report_{}", rep.attack);
        let name = match self.format {
            Format::Json => {
                let name = format!("{stem}.json");
                fs::write(self.dir.join(&name), rep.to_json())?;
                name
            }
            Format::Csv => {
                let name = format!("{stem}.csv");
                let (header, records) = rep.table();
                let mut w = csv::Writer::from_path(self.dir.join(&name))?;
                w.write_record(&header)?;
                for r in records {
                    w.write_record(&r)?;
                }
                w.flush()?;
                name
            }
        };
        self.outputs.push(OutputEntry {
            path: name,
            kind: "report",
            attack: Some(rep.attack.clone()),
        });
        self.reports.push(rep);
        Ok(())
    }

    fn trace(&mut self, name: String, body: String) -> anyhow::Result<()> {
        fs::write(self.dir.join(&name), body)?;
        self.outputs.push(OutputEntry {
            path: name,
            kind: "trace",
            attack: Some("1a".into()),
        });
        Ok(())
    }
}

/// JSONL traces of the first `n` trials of the first optimistic grid cell.
fn revert_traces(cfg: &ExperimentConfig, n: u64) -> Result<String, Failure> {
    let parties = parties();
    let mut sc = Scenario::new(cfg);
    sc.policy = ExecutionPolicy::Optimistic;
    sc.k = cfg.grid.k[0];
    sc.chain.p_reorg = cfg.grid.p_reorg.iter().copied().fold(0.0, f64::max);
    sc.delays.delta = cfg.grid.delta_ms[0];
    let wc = sc.world_config(cfg, &parties);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&revert_trial(&wc, &parties, trial_seed(cfg.base_seed, i), i)?.to_jsonl());
    }
    Ok(out)
}

fn run(cli: &Cli, cfg: &ExperimentConfig, w: &mut Writer) -> Result<(), Failure> {
    let all = cli.command == Command::All;
    if let Command::Attack1a { trace_samples } = cli.command {
        if trace_samples > 0 {
            w.trace("trace_1a.jsonl".into(), revert_traces(cfg, trace_samples)?)?;
        }
    }
    if all || matches!(cli.command, Command::Attack1a { .. }) {
        w.report(run_attack_1a(cfg)?.to_report(cfg))?;
    }
    if all || cli.command == Command::Attack1b {
        w.report(run_attack_1b(cfg)?.to_report(cfg))?;
    }
    if all || cli.command == Command::Attack2 {
        w.report(run_attack_2(cfg)?.to_report(cfg))?;
    }
    if all || cli.command == Command::Attack3 {
        w.report(run_attack_3(cfg)?.to_report(cfg))?;
    }
    if all || cli.command == Command::Attack4 {
        let sel = run_attack_4(cfg)?;
        w.report(attack4_report(cfg, &sel))?;
    }
    if all || cli.command == Command::Theorems {
        w.report(validate_theorems(cfg)?.to_report(cfg))?;
    }
    Ok(())
}

fn subcommand_name(c: Command) -> &'static str {
    match c {
        Command::Attack1a { .. } => "attack1a",
        Command::Attack1b => "attack1b",
        Command::Attack2 => "attack2",
        Command::Attack3 => "attack3",
        Command::Attack4 => "attack4",
        Command::Theorems => "theorems",
        Command::All => "all",
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .map_err(Failure::Config)?;
    let mut w = Writer {
        dir: &cli.out,
        format: cli.format,
        outputs: Vec::new(),
        reports: Vec::new(),
    };
    run(cli, &cfg, &mut w)?;

    let mut failed = Vec::new();
    for rep in &w.reports {
        for c in rep.checks.iter().filter(|c| !c.pass) {
            failed.push(format!("{}:{} ({})", rep.attack, c.name, c.detail));
        }
    }
    let stats = RunStats {
        reports: w.reports.len(),
        rows: w.reports.iter().map(|r| r.rows.len()).sum(),
        checks: w.reports.iter().map(|r| r.checks.len()).sum(),
        checks_failed: failed.len(),
    };
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION"),
        command_line: std::env::args().collect(),
        subcommand: subcommand_name(cli.command).into(),
        format: cli.format,
        seed: cfg.base_seed,
        config: cfg,
        stats,
        outputs: w.outputs,
    };
    let body = serde_json::to_string_pretty(&manifest).context("serializing manifest")? + "\n";
    fs::write(cli.out.join("manifest.json"), body).context("writing manifest")?;

    for f in &failed {
        eprintln!("check failed: {f}");
    }
    eprintln!(
        "{} report(s), {} check(s), {} failed; written to {}",
        manifest.stats.reports,
        manifest.stats.checks,
        failed.len(),
        cli.out.display()
    );
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if cli.strict => ExitCode::from(1),
        Ok(false) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(1)
        }
    }
}

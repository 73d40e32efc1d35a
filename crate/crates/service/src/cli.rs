//! Command-line interface.

use std::fs;
use std::io::Write;
use std::net::Ipv4Addr;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use clickshield_core::poisson_model::{
    expected_repeats, lambda_of, loss_factor, loss_upper_bound, ModelParams,
};
use clickshield_core::traffic_simulator::{run_attack_scenario, run_nat_scenario_with, AttackReport};
use clickshield_core::{AttackScenario, EngineConfig, NatScenario, SamplingMode, SimReport, Threshold, WindowConfig};
use serde::Serialize;

use crate::config::{ConfigLayer, ServiceConfig};
use crate::decision_log::{replay_log, LogError};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "clickshield", version, about = "Repeated-click filter for pay-per-click accounting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP ingestion service.
    Serve(EngineArgs),
    /// Run Monte Carlo scenarios.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Print λ, N(λ), the loss factor and its first-order bound.
    EvalModel(EvalArgs),
    /// Re-run a decision log through a fresh engine and compare decisions.
    Replay(ReplayArgs),
}

/// Service settings; flags override `--config` and `CLICKSHIELD_*` variables.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// TOML file with service settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<std::net::SocketAddr>,
    /// Registry file (`CIDR,net_id[,pool_size]` rows).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Statistics window in seconds.
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub fallback_pool_size: Option<u64>,
    #[arg(long)]
    pub decision_log: Option<PathBuf>,
    #[arg(long, conflicts_with = "decision_log")]
    pub no_decision_log: bool,
    #[arg(long)]
    pub ledger_capacity: Option<usize>,
    #[arg(long)]
    pub max_clock_skew: Option<f64>,
}

impl EngineArgs {
    pub fn resolve(&self) -> anyhow::Result<ServiceConfig> {
        let file = match &self.config {
            Some(path) => ConfigLayer::from_toml_file(path)?,
            None => ConfigLayer::default(),
        };
        let flags = ConfigLayer {
            listen_address: self.listen,
            registry_path: self.registry.clone(),
            window_seconds: self.window,
            threshold: self.threshold,
            fallback_pool_size: self.fallback_pool_size,
            decision_log_path: if self.no_decision_log {
                Some(PathBuf::new())
            } else {
                self.decision_log.clone()
            },
            ledger_capacity: self.ledger_capacity,
            log_queue_capacity: None,
            max_clock_skew_seconds: self.max_clock_skew,
        };
        file.merge(ConfigLayer::from_env()?).merge(flags).resolve()
    }
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Spread users over a NAT pool and measure the repeated-click fraction.
    Nat(NatArgs),
    /// Feed a synthetic single-address click flood through the filter.
    Attack(AttackArgs),
}

#[derive(Debug, Args)]
pub struct NatArgs {
    #[arg(long)]
    pub pool: u64,
    #[arg(long)]
    pub users: u64,
    #[arg(long)]
    pub clickers: u64,
    #[arg(long, default_value_t = 1000)]
    pub runs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Assign every user an address instead of sampling clicked addresses directly.
    #[arg(long)]
    pub materialize_users: bool,
    /// Directory for `nat-report.json` and `nat-runs.csv`.
    #[arg(long, default_value = "reports")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub clicks: u64,
    /// Pool size of the attacker's range.
    #[arg(long, default_value_t = 256)]
    pub pool: u64,
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "203.0.113.7")]
    pub attacker_ip: Ipv4Addr,
    #[arg(long, default_value = "/ad")]
    pub dest: String,
    /// Mean seconds between attacker clicks.
    #[arg(long, default_value_t = 1200.0)]
    pub interval: f64,
    /// 0 = regular spacing, 1 = exponential gaps.
    #[arg(long, default_value_t = 1.0)]
    pub jitter: f64,
    /// Benign clicks per second from other hosts in the attacker's range.
    #[arg(long, default_value_t = 0.0)]
    pub background_rate: f64,
    /// Statistics window in seconds (default: 30 days).
    #[arg(long, default_value_t = 2_592_000.0)]
    pub window: f64,
    /// Directory for `attack-report.json` and `attack-trace.csv`.
    #[arg(long, default_value = "reports")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pool: u64,
    /// One or more click counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub clicks: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Failed(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(EXIT_USAGE),
            CliError::Failed(_) => ExitCode::from(EXIT_FAILURE),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(args) => {
            let config = args.resolve().map_err(|e| usage(format!("{e:#}")))?;
            let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
            runtime.block_on(crate::server::serve(&config))?;
            Ok(())
        }
        Command::Simulate(SimulateCommand::Nat(args)) => simulate_nat(&args, out),
        Command::Simulate(SimulateCommand::Attack(args)) => simulate_attack(&args, out),
        Command::EvalModel(args) => eval_model(&args, out),
        Command::Replay(args) => replay(&args, out),
    }
}

#[derive(Serialize)]
struct RunRow {
    run_index: u64,
    repeated_fraction: f64,
    repeated_clicks: u64,
    multi_click_addresses: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

pub fn write_nat_csv(path: &Path, report: &SimReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for s in &report.samples {
        w.serialize(RunRow {
            run_index: s.run_index,
            repeated_fraction: report.repeated_fraction(s),
            repeated_clicks: s.repeated_clicks,
            multi_click_addresses: s.multi_click_addresses,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn simulate_nat(args: &NatArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scenario = NatScenario {
        pool_size: args.pool,
        user_count: args.users,
        clicker_count: args.clickers,
        runs: args.runs,
        seed: args.seed,
    };
    scenario.validate().map_err(|e| usage(e.to_string()))?;
    let mode = if args.materialize_users {
        SamplingMode::MaterializeUsers
    } else {
        SamplingMode::Direct
    };

    let started = Instant::now();
    let report = run_nat_scenario_with(&scenario, mode).map_err(|e| usage(e.to_string()))?;
    let elapsed = started.elapsed();

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let json_path = args.out_dir.join("nat-report.json");
    let csv_path = args.out_dir.join("nat-runs.csv");
    write_json(&json_path, &report)?;
    write_nat_csv(&csv_path, &report)?;

    let w = |e: std::io::Error| CliError::Failed(e.into());
    writeln!(out, "runs                      {}", report.runs_completed).map_err(w)?;
    writeln!(out, "mean repeated fraction    {:.6e}", report.mean_repeated_fraction).map_err(w)?;
    writeln!(out, "standard error            {:.3e}", report.std_error).map_err(w)?;
    writeln!(out, "model loss factor L       {:.6e}", report.model_loss_factor).map_err(w)?;
    writeln!(out, "first-order bound C/2A    {:.6e}", report.model_upper_bound).map_err(w)?;
    writeln!(out, "|mean - C/2A|             {:.6e}", report.abs_difference).map_err(w)?;
    writeln!(out, "multi-click address share {:.6e}", report.mean_address_fraction).map_err(w)?;
    writeln!(out, "elapsed                   {:.2?}", elapsed).map_err(w)?;
    writeln!(out, "wrote {} and {}", json_path.display(), csv_path.display()).map_err(w)?;
    Ok(())
}

pub fn write_attack_csv(path: &Path, report: &AttackReport) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        seq: u64,
        time: f64,
        source: Ipv4Addr,
        from_attacker: bool,
        outcome: &'a str,
        observed_c: u64,
        pool_size: u64,
        loss_bound: f64,
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for t in &report.trace {
        w.serialize(Row {
            seq: t.seq,
            time: t.click.time,
            source: t.click.source,
            from_attacker: t.from_attacker,
            outcome: if t.decision.is_accept() { "ACCEPT" } else { "DISCARD" },
            observed_c: t.decision.observed_c,
            pool_size: t.decision.pool_size,
            loss_bound: t.decision.loss_bound,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn simulate_attack(args: &AttackArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let pool = NonZeroU64::new(args.pool).ok_or_else(|| usage("--pool must be positive"))?;
    let threshold = Threshold::new(args.threshold).map_err(|e| usage(e.to_string()))?;
    let window = WindowConfig::new(args.window).map_err(|e| usage(e.to_string()))?;
    let scenario = AttackScenario {
        mean_interval_seconds: args.interval,
        interval_jitter: args.jitter,
        background_rate: args.background_rate,
        ..AttackScenario::new(args.attacker_ip, args.dest.clone(), args.clicks, args.seed)
    };
    scenario.validate().map_err(|e| usage(e.to_string()))?;

    let registry = Arc::new(scenario.single_net_registry(pool));
    let report = run_attack_scenario(&scenario, EngineConfig::new(window, threshold), registry)
        .map_err(|e| CliError::Failed(e.into()))?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let json_path = args.out_dir.join("attack-report.json");
    let csv_path = args.out_dir.join("attack-trace.csv");
    write_json(&json_path, &report)?;
    write_attack_csv(&csv_path, &report)?;

    let w = |e: std::io::Error| CliError::Failed(e.into());
    writeln!(out, "accepted={} discarded={}", report.accepted, report.discarded).map_err(w)?;
    writeln!(
        out,
        "attacker: accepted={} discarded={}",
        report.attacker_accepted, report.attacker_discarded
    )
    .map_err(w)?;
    writeln!(out, "wrote {} and {}", json_path.display(), csv_path.display()).map_err(w)?;
    Ok(())
}

fn eval_model(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.pool == 0 {
        return Err(usage("--pool must be at least 1"));
    }
    if args.clicks.contains(&0) {
        return Err(usage("--clicks must be at least 1: the loss factor is undefined for zero clicks"));
    }
    let w = |e: std::io::Error| CliError::Failed(e.into());
    writeln!(
        out,
        "{:>12} {:>12} {:>14} {:>14} {:>14} {:>14} {:>12}",
        "A", "C", "lambda", "N(lambda)", "L(A,C)", "C/2A", "|L - C/2A|"
    )
    .map_err(w)?;
    for &c in &args.clicks {
        let params = ModelParams::new(args.pool, c).map_err(|e| usage(e.to_string()))?;
        let lambda = lambda_of(&params);
        let loss = loss_factor(&params).map_err(|e| usage(e.to_string()))?;
        let bound = loss_upper_bound(&params);
        writeln!(
            out,
            "{:>12} {:>12} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>12.4e}",
            args.pool,
            c,
            lambda.value(),
            expected_repeats(lambda),
            loss,
            bound,
            (loss - bound).abs()
        )
        .map_err(w)?;
    }
    Ok(())
}

fn replay(args: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = args.engine.resolve().map_err(|e| usage(format!("{e:#}")))?;
    let engine_config = config.engine_config().map_err(|e| usage(format!("{e:#}")))?;
    let registry = config.load_registry()?;
    let report = replay_log(&args.log, engine_config, registry).map_err(|e: LogError| {
        CliError::Failed(anyhow::Error::new(e).context(format!("reading {}", args.log.display())))
    })?;

    let w = |e: std::io::Error| CliError::Failed(e.into());
    match &report.divergence {
        None => {
            writeln!(out, "replayed {} records: no divergence", report.records).map_err(w)?;
            Ok(())
        }
        Some(d) => {
            writeln!(out, "divergence at sequence {}", d.seq).map_err(w)?;
            writeln!(out, "  click:    {}", serde_json::to_string(&d.click).unwrap_or_default()).map_err(w)?;
            writeln!(out, "  recorded: {}", serde_json::to_string(&d.recorded).unwrap_or_default()).map_err(w)?;
            match (&d.replayed, &d.error) {
                (Some(r), _) => writeln!(out, "  replayed: {}", serde_json::to_string(r).unwrap_or_default()),
                (None, Some(e)) => writeln!(out, "  replayed: error: {e}"),
                (None, None) => Ok(()),
            }
            .map_err(w)?;
            Err(CliError::Failed(anyhow::anyhow!(
                "replay diverged at sequence {}",
                d.seq
            )))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentrade::backtest::report::{export_report, replay, write_run};
use agentrade::backtest::{build_policy, run_backtest, PolicyConfig, RunConfig, RunData};
use agentrade::evidence::ingest_feed;
use agentrade::market_data::{load_series_with, load_ticks, write_series, GapPolicy};
use agentrade::model_gateway::EndpointConfig;
use agentrade::synth::{generate, write_evidence, SynthConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "agentrade", version, about = "Backtest harness for a two-tier crypto trading agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Stub,
    Remote,
    Abstain,
}

#[derive(Clone, Copy, ValueEnum)]
enum GapArg {
    Reject,
    ForwardFill,
}

#[derive(Subcommand)]
enum Command {
    /// Validate data files and print a summary.
    Ingest {
        /// Take the data files from a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        m15: Option<PathBuf>,
        #[arg(long)]
        h1: Option<PathBuf>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        ticks: Option<PathBuf>,
        #[arg(long, default_value = "BTCUSDT")]
        symbol: String,
        #[arg(long, value_enum, default_value = "reject")]
        gaps: GapArg,
    },
    /// Run one backtest and write its logs to `<out>/<run name>/`.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        memory: Option<Switch>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Collect the run directories under `--runs` into a comparison report.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive a run's metrics from its logs and compare with the recorded row.
    Replay {
        /// A run directory or any log file inside it.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Write a seeded synthetic dataset (15-minute candles and an evidence feed).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        seed: u64,
        #[arg(long, default_value_t = 35_040)]
        bars: usize,
        #[arg(long, default_value_t = 31)]
        warmup_days: i64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Ingest { config, m15, h1, evidence, ticks, symbol, gaps } => {
            let (mut files, symbol, interval, gaps) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    let d = cfg.data;
                    ((Some(d.m15), d.h1, d.evidence, d.ticks), cfg.run.symbol, cfg.run.interval_secs, d.gaps)
                }
                None => {
                    let gaps = match gaps {
                        GapArg::Reject => GapPolicy::Reject,
                        GapArg::ForwardFill => GapPolicy::ForwardFill,
                    };
                    ((m15, h1, evidence, ticks), symbol, 900, gaps)
                }
            };
            if files.0.is_none() && files.1.is_none() && files.2.is_none() && files.3.is_none() {
                bail!("nothing to ingest: pass --config or at least one data file");
            }
            if let Some(p) = files.0.take() {
                let s = load_series_with(&p, &symbol, interval, gaps).with_context(|| format!("{}", p.display()))?;
                print_series("m15", &p, &s);
            }
            if let Some(p) = files.1.take() {
                let s = load_series_with(&p, &symbol, 3600, gaps).with_context(|| format!("{}", p.display()))?;
                print_series("h1", &p, &s);
            }
            if let Some(p) = files.2.take() {
                let feed = ingest_feed(&p)?;
                println!("evidence {}: {} items, {} skipped", p.display(), feed.items.len(), feed.skipped);
            }
            if let Some(p) = files.3.take() {
                let t = load_ticks(&p).with_context(|| format!("{}", p.display()))?;
                println!("ticks {}: {} ticks", p.display(), t.len());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Backtest { config, memory, policy, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = memory {
                cfg.run.memory = matches!(m, Switch::On);
            }
            match policy {
                Some(PolicyArg::Stub) => cfg.policy = PolicyConfig::Stub,
                Some(PolicyArg::Abstain) => cfg.policy = PolicyConfig::Abstain,
                Some(PolicyArg::Remote) if !matches!(cfg.policy, PolicyConfig::Remote(_)) => {
                    cfg.policy = PolicyConfig::Remote(EndpointConfig::default())
                }
                _ => {}
            }
            let data = RunData::load(&cfg)?;
            let mut p = build_policy(&cfg)?;
            let output = run_backtest(&cfg, &data, p.as_mut())?;
            let dir = out.join(&output.name);
            write_run(&output, &cfg, &dir)?;
            let m = output.metrics;
            println!(
                "{}: {} bars, {} epochs, trades {}, total return {:.4}, max dd {:.4}, sharpe {:.3}, equity end {:.2}, fallbacks {}",
                output.name,
                output.bars,
                output.epochs.len(),
                m.trades,
                m.total_return,
                m.max_dd,
                m.sharpe,
                m.equity_end,
                m.fallbacks
            );
            println!("logs written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs, out } => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
                .with_context(|| format!("reading {}", runs.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("metrics.csv").is_file() && p.join("run.json").is_file())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                bail!("no completed runs under {}", runs.display());
            }
            let text = export_report(&dirs, out.as_deref().unwrap_or(&runs))?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { log, tol } => {
            let dir = run_dir(&log);
            let check = replay(&dir, tol)?;
            let m = check.recomputed;
            println!(
                "recomputed: trades {}, win rate {}, total return {}, cagr {}, max dd {}, sharpe {}, equity end {}, fallbacks {}",
                m.trades, m.win_rate, m.total_return, m.cagr, m.max_dd, m.sharpe, m.equity_end, check.logged_fallbacks
            );
            if check.ok() {
                println!("matches recorded metrics");
                Ok(ExitCode::SUCCESS)
            } else {
                for line in &check.mismatches {
                    println!("mismatch: {line}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Synth { out, seed, bars, warmup_days } => {
            let cfg = SynthConfig { seed, bars, warmup_days, ..SynthConfig::default() };
            let data = generate(&cfg);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let m15 = out.join("btcusdt_15m.csv");
            write_series(&data.series, &m15)?;
            let ev = out.join("evidence.jsonl");
            write_evidence(&data.evidence, &ev).with_context(|| format!("writing {}", ev.display()))?;
            println!("wrote {} bars to {} and {} items to {}", data.series.len(), m15.display(), data.evidence.len(), ev.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_dir(log: &Path) -> PathBuf {
    if log.is_dir() {
        log.to_path_buf()
    } else {
        log.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

fn print_series(name: &str, path: &Path, s: &agentrade::market_data::CandleSeries) {
    match (s.bars.first(), s.bars.last()) {
        (Some(a), Some(b)) => println!("{name} {}: {} bars from {} to {}", path.display(), s.len(), a.ts, b.ts),
        _ => println!("{name} {}: empty", path.display()),
    }
}

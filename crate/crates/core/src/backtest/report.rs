//! Run artifacts on disk, the comparison report and log replay.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the resolved configuration |
//! | `run.json` | run identity and decision epochs |
//! | `trades.csv` | one row per fill |
//! | `equity.csv` | equity at every bar close |
//! | `events.jsonl` | fills, rejections, halts, shocks, fallbacks |
//! | `decisions.jsonl` | one record per decision epoch |
//! | `reflections.jsonl` | one record per distilled experience |
//! | `memory.jsonl` | the final replay buffer (memory runs only) |
//! | `metrics.csv` | the run's metrics row |

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::engine::{Event, EventRecord, RunOutput};
use super::metrics::{compute_metrics, Metrics};
use super::BacktestError;
use crate::execution::Fill;

pub const METRICS_HEADER: &str = "Provider,Model,Memory,Trades,Win Rate,Total Ret.,CAGR,Max DD,Sharpe,Avg Ret/Trade,Median Ret/Trade,Equity End,Fallbacks";

/// Identity of a run, stored next to its logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub provider: String,
    pub model: String,
    pub memory: bool,
    pub bars: usize,
    pub epochs: Vec<i64>,
}

impl RunSummary {
    pub fn of(out: &RunOutput) -> Self {
        Self {
            name: out.name.clone(),
            provider: out.provider.clone(),
            model: out.model.clone(),
            memory: out.memory,
            bars: out.bars,
            epochs: out.epochs.clone(),
        }
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub provider: String,
    pub model: String,
    pub memory: bool,
    pub metrics: Metrics,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.provider),
            csv_field(&self.model),
            if self.memory { "On" } else { "Off" },
            m.trades,
            m.win_rate,
            m.total_return,
            m.cagr,
            m.max_dd,
            m.sharpe,
            m.avg_ret_per_trade,
            m.median_ret_per_trade,
            m.equity_end,
            m.fallbacks
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BacktestError + '_ {
    move |e| BacktestError::Io(path.to_path_buf(), e)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BacktestError + '_ {
    move |e| BacktestError::Replay(format!("{}: {e}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), BacktestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| BacktestError::Replay(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BacktestError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| BacktestError::Replay(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Write every artifact of a run into `dir`, creating it if needed.
pub fn write_run(out: &RunOutput, cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<(), BacktestError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(io_err(&p))?;
    let p = dir.join("run.json");
    let summary = serde_json::to_string_pretty(&RunSummary::of(out)).map_err(|e| BacktestError::Replay(e.to_string()))?;
    fs::write(&p, summary).map_err(io_err(&p))?;

    let p = dir.join("trades.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    if out.fills.is_empty() {
        w.write_record(["fill_ts", "side", "qty", "price", "fee", "origin", "decision_id"]).map_err(csv_err(&p))?;
    }
    for f in &out.fills {
        w.serialize(f).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    let p = dir.join("equity.csv");
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["ts", "equity"]).map_err(csv_err(&p))?;
    for (ts, e) in &out.curve {
        w.serialize((ts, e)).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;

    write_jsonl(&dir.join("events.jsonl"), &out.events)?;
    write_jsonl(&dir.join("decisions.jsonl"), &out.decisions)?;
    write_jsonl(&dir.join("reflections.jsonl"), &out.reflections)?;
    if let Some(buffer) = &out.buffer {
        let p = dir.join("memory.jsonl");
        buffer.save(&p).map_err(|e| BacktestError::Replay(format!("{}: {e}", p.display())))?;
    }

    let row = MetricsRow { provider: out.provider.clone(), model: out.model.clone(), memory: out.memory, metrics: out.metrics };
    let p = dir.join("metrics.csv");
    fs::write(&p, format!("{METRICS_HEADER}\n{}\n", row.to_csv())).map_err(io_err(&p))?;
    Ok(())
}

/// Parse a metrics table with [`METRICS_HEADER`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, BacktestError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(BacktestError::Replay(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |col: usize| BacktestError::Replay(format!("{}: bad value {:?} in column {col}", path.display(), &rec[col]));
        let f = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        let u = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        let memory = match &rec[2] {
            "On" => true,
            "Off" => false,
            _ => return Err(bad(2)),
        };
        rows.push(MetricsRow {
            provider: rec[0].to_string(),
            model: rec[1].to_string(),
            memory,
            metrics: Metrics {
                trades: u(3)?,
                win_rate: f(4)?,
                total_return: f(5)?,
                cagr: f(6)?,
                max_dd: f(7)?,
                sharpe: f(8)?,
                avg_ret_per_trade: f(9)?,
                median_ret_per_trade: f(10)?,
                equity_end: f(11)?,
                fallbacks: u(12)?,
            },
        });
    }
    Ok(rows)
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, BacktestError> {
    read_jsonl(path.as_ref())
}

pub fn read_fills(path: impl AsRef<Path>) -> Result<Vec<Fill>, BacktestError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<Fill>, _>>().map_err(csv_err(path))
}

pub fn read_equity(path: impl AsRef<Path>) -> Result<Vec<(i64, f64)>, BacktestError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<(i64, f64)>, _>>().map_err(csv_err(path))
}

pub fn read_summary(dir: impl AsRef<Path>) -> Result<RunSummary, BacktestError> {
    let p = dir.as_ref().join("run.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| BacktestError::Replay(format!("{}: {e}", p.display())))
}

/// Metrics re-derived from a run's logs next to the recorded row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub recorded: Metrics,
    pub recomputed: Metrics,
    /// Fallback events found in the event log.
    pub logged_fallbacks: u64,
    pub mismatches: Vec<String>,
}

impl ReplayCheck {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recompute a run's metrics from `equity.csv`, `trades.csv` and the event
/// log in `dir`, comparing each value with `metrics.csv` to within `tol`
/// (relative for magnitudes above one).
pub fn replay(dir: impl AsRef<Path>, tol: f64) -> Result<ReplayCheck, BacktestError> {
    let dir = dir.as_ref();
    let summary = read_summary(dir)?;
    let curve = read_equity(dir.join("equity.csv"))?;
    let fills = read_fills(dir.join("trades.csv"))?;
    let events = read_events(dir.join("events.jsonl"))?;
    let logged_fallbacks = events.iter().filter(|e| matches!(e.event, Event::Fallback { .. })).count() as u64;
    let recorded = read_metrics(dir.join("metrics.csv"))?
        .into_iter()
        .next()
        .ok_or_else(|| BacktestError::Replay(format!("{}: no metrics row", dir.display())))?
        .metrics;
    let recomputed = compute_metrics(&curve, &fills, &summary.epochs, logged_fallbacks);

    let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
    let pairs = [
        ("win_rate", recorded.win_rate, recomputed.win_rate),
        ("total_return", recorded.total_return, recomputed.total_return),
        ("cagr", recorded.cagr, recomputed.cagr),
        ("max_dd", recorded.max_dd, recomputed.max_dd),
        ("sharpe", recorded.sharpe, recomputed.sharpe),
        ("avg_ret_per_trade", recorded.avg_ret_per_trade, recomputed.avg_ret_per_trade),
        ("median_ret_per_trade", recorded.median_ret_per_trade, recomputed.median_ret_per_trade),
        ("equity_end", recorded.equity_end, recomputed.equity_end),
    ];
    let mut mismatches: Vec<String> = pairs
        .iter()
        .filter(|(_, a, b)| !close(*a, *b))
        .map(|(name, a, b)| format!("{name}: recorded {a}, recomputed {b}"))
        .collect();
    if recorded.trades != recomputed.trades {
        mismatches.push(format!("trades: recorded {}, recomputed {}", recorded.trades, recomputed.trades));
    }
    if recorded.fallbacks != logged_fallbacks {
        mismatches.push(format!("fallbacks: recorded {}, logged {logged_fallbacks}", recorded.fallbacks));
    }
    Ok(ReplayCheck { recorded, recomputed, logged_fallbacks, mismatches })
}

/// Collect the metrics rows of `run_dirs` into `out_dir/metrics.csv`, their
/// equity curves into `out_dir/curves/` and a human-readable
/// `out_dir/report.txt`, returning the report text.
pub fn export_report(run_dirs: &[PathBuf], out_dir: impl AsRef<Path>) -> Result<String, BacktestError> {
    let out_dir = out_dir.as_ref();
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(read_metrics(dir.join("metrics.csv"))?);
    }
    rows.sort_by(|a, b| (&a.provider, &a.model, !a.memory).cmp(&(&b.provider, &b.model, !b.memory)));
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut table = String::from(METRICS_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.to_csv());
        table.push('\n');
    }
    let p = out_dir.join("metrics.csv");
    fs::write(&p, &table).map_err(io_err(&p))?;

    let curves = out_dir.join("curves");
    fs::create_dir_all(&curves).map_err(io_err(&curves))?;
    for dir in run_dirs {
        let name = read_summary(dir)?.name;
        let (from, to) = (dir.join("equity.csv"), curves.join(format!("{name}.csv")));
        fs::copy(&from, &to).map_err(io_err(&to))?;
    }

    let text = render_report(&rows);
    let p = out_dir.join("report.txt");
    fs::write(&p, &text).map_err(io_err(&p))?;
    Ok(text)
}

/// Fixed-width table grouped by provider.
pub fn render_report(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    let mut provider: Option<&str> = None;
    let line = format!(
        "{:<24} {:<6} {:>6} {:>8} {:>10} {:>10} {:>8} {:>8} {:>10} {:>10} {:>12} {:>9}\n",
        "Model", "Memory", "Trades", "Win Rate", "Total Ret.", "CAGR", "Max DD", "Sharpe", "Avg/Trade", "Med/Trade", "Equity End", "Fallbacks"
    );
    for r in rows {
        if provider != Some(r.provider.as_str()) {
            if provider.is_some() {
                s.push('\n');
            }
            provider = Some(&r.provider);
            s.push_str(&format!("== {} ==\n", r.provider));
            s.push_str(&line);
        }
        let m = &r.metrics;
        s.push_str(&format!(
            "{:<24} {:<6} {:>6} {:>7.1}% {:>9.2}% {:>9.2}% {:>7.2}% {:>8.3} {:>9.2}% {:>9.2}% {:>12.2} {:>9}\n",
            r.model,
            if r.memory { "On" } else { "Off" },
            m.trades,
            100.0 * m.win_rate,
            100.0 * m.total_return,
            100.0 * m.cagr,
            100.0 * m.max_dd,
            m.sharpe,
            100.0 * m.avg_ret_per_trade,
            100.0 * m.median_ret_per_trade,
            m.equity_end,
            m.fallbacks
        ));
    }
    s.push_str(
        "\nSharpe: mean over standard deviation of log equity returns between decision epochs \
         (plus the final mark), annualized by the number of such returns per year.\n",
    );
    s
}

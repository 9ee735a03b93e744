//! Historical simulation of the full two-tier pipeline, with metrics,
//! reports and log replay.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod report;

use std::path::PathBuf;

use tracing::info;

pub use config::{PolicyConfig, RunConfig, ScheduleSpec, Timestamp};
pub use engine::{run_backtest, DecisionRecord, Event, EventRecord, FillReason, ReflectionRecord, RunOutput};
pub use metrics::{compute_metrics, Metrics};

use crate::evidence::{ingest_feed, EvidenceItem};
use crate::market_data::{load_series_with, load_ticks, resample, CandleSeries, MarketDataError, Tick};
use crate::model_gateway::{AbstainPolicy, Policy, RemotePolicy, StubPolicy};

#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot access {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Data(#[from] MarketDataError),
    #[error("evidence: {0}")]
    Evidence(#[from] crate::evidence::EvidenceError),
    #[error("no bar in the run range can be evaluated: {0}")]
    WarmUp(String),
    #[error("at {ts}: {msg}")]
    Runtime { ts: i64, msg: String },
    #[error("log replay: {0}")]
    Replay(String),
}

/// Input data for a run.
#[derive(Debug, Clone)]
pub struct RunData {
    /// 15-minute bars including warm-up history.
    pub m15: CandleSeries,
    pub h1: CandleSeries,
    pub evidence: Vec<EvidenceItem>,
    pub ticks: Option<Vec<Tick>>,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self, BacktestError> {
        let d = &cfg.data;
        let m15 = load_series_with(&d.m15, &cfg.run.symbol, cfg.run.interval_secs, d.gaps)?;
        let h1 = match &d.h1 {
            Some(p) => Some(load_series_with(p, &cfg.run.symbol, 3600, d.gaps)?),
            None => None,
        };
        let evidence = match &d.evidence {
            Some(p) => ingest_feed(p)?.items,
            None => Vec::new(),
        };
        let ticks = match &d.ticks {
            Some(p) => Some(load_ticks(p)?),
            None => None,
        };
        let data = Self::from_parts(m15, h1, evidence, ticks)?;
        info!(bars = data.m15.len(), h1 = data.h1.len(), evidence = data.evidence.len(), "loaded run data");
        Ok(data)
    }

    /// Assemble run data, aggregating hourly bars from the 15-minute series
    /// when none are given.
    pub fn from_parts(
        m15: CandleSeries,
        h1: Option<CandleSeries>,
        evidence: Vec<EvidenceItem>,
        ticks: Option<Vec<Tick>>,
    ) -> Result<Self, BacktestError> {
        let h1 = match h1 {
            Some(h1) => h1,
            None => hourly_from(&m15)?,
        };
        Ok(Self { m15, h1, evidence, ticks })
    }

    /// The data as it would have been available at time `t`: bars opened
    /// at or before `t`, ticks before the end of that bar and evidence up
    /// to `t`.
    pub fn truncated(&self, t: i64) -> Result<Self, BacktestError> {
        let m15 = self.m15.truncated(t);
        let end_ms = (t + self.m15.interval) * 1000;
        Ok(Self {
            h1: hourly_from(&m15)?,
            m15,
            evidence: self.evidence.iter().filter(|e| e.ts <= t).cloned().collect(),
            ticks: self.ticks.as_ref().map(|v| v.iter().filter(|k| k.ts_ms < end_ms).copied().collect()),
        })
    }
}

fn hourly_from(m15: &CandleSeries) -> Result<CandleSeries, BacktestError> {
    let per_hour = (3600 / m15.interval).max(1) as usize;
    let skip = m15.bars.iter().position(|b| b.ts % 3600 == 0).unwrap_or(m15.len());
    let aligned = CandleSeries::new(m15.symbol.clone(), m15.interval, m15.bars[skip..].to_vec());
    Ok(resample(&aligned, per_hour)?)
}

/// Decision timestamps from the first evaluable bar `first` to the
/// exclusive range end.
pub fn decision_schedule(first: i64, end: i64, interval: i64, spec: &ScheduleSpec) -> Result<Vec<i64>, BacktestError> {
    let usable = ((end - first) / interval).max(0) as usize;
    match *spec {
        ScheduleSpec::FixedCount { n } => {
            if n == 0 || n > usable {
                return Err(BacktestError::Config(format!("{n} epochs requested but only {usable} bars are usable")));
            }
            let stride = (usable / n) as i64;
            Ok((0..n as i64).map(|k| first + k * stride * interval).collect())
        }
        ScheduleSpec::Cadence { every_secs } => {
            let start = first + (every_secs - first.rem_euclid(every_secs)) % every_secs;
            Ok((start..end).step_by(every_secs as usize).collect())
        }
    }
}

/// The policy named by the configuration.
pub fn build_policy(cfg: &RunConfig) -> Result<Box<dyn Policy>, BacktestError> {
    Ok(match &cfg.policy {
        PolicyConfig::Stub => Box::new(StubPolicy { band_bps: cfg.reflection.band_bps }),
        PolicyConfig::Abstain => Box::new(AbstainPolicy),
        PolicyConfig::Remote(ep) => Box::new(
            RemotePolicy::http(ep.clone(), cfg.run.symbol.clone(), cfg.run.seed)
                .map_err(|e| BacktestError::Config(e.to_string()))?,
        ),
    })
}

/// Load data, build the policy and run.
pub fn run_config(cfg: &RunConfig) -> Result<RunOutput, BacktestError> {
    let data = RunData::load(cfg)?;
    let mut policy = build_policy(cfg)?;
    run_backtest(cfg, &data, policy.as_mut())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_count_protocol() {
        let start = 1_736_035_200;
        let end = start + 35_040 * 900;
        let s = decision_schedule(start, end, 900, &ScheduleSpec::FixedCount { n: 122 }).unwrap();
        assert_eq!(s.len(), 122);
        assert!(s.windows(2).all(|w| w[1] - w[0] == 287 * 900));
        assert_eq!(s[0], start);
        assert!(*s.last().unwrap() < end);
        assert_eq!(decision_schedule(start, end, 900, &ScheduleSpec::FixedCount { n: 1 }).unwrap(), vec![start]);
        assert!(decision_schedule(start, start + 10 * 900, 900, &ScheduleSpec::FixedCount { n: 11 }).is_err());
    }

    #[test]
    fn hourly_cadence() {
        let s = decision_schedule(900, 900 * 40, 900, &ScheduleSpec::Cadence { every_secs: 3600 }).unwrap();
        assert_eq!(s[0], 3600);
        assert!(s.windows(2).all(|w| w[1] - w[0] == 4 * 900));
    }
}

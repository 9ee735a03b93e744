//! Run configuration, read from a TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::BacktestError;
use crate::market_data::GapPolicy;
use crate::memory::{DAY_SECS, DEFAULT_ALPHA, DEFAULT_K};
use crate::model_gateway::EndpointConfig;
use crate::reflection::DEFAULT_BAND_BPS;
use crate::regime::ThresholdTable;
use crate::risk::{CostModel, RiskConfig};
use crate::shock_guard::ShockConfig;
use crate::strategist::SnapshotConfig;

/// Epoch seconds, written as RFC 3339 or a plain `YYYY-MM-DD` (UTC midnight).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Self(dt.timestamp()));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(|d| Self(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp()))
            .map_err(|_| format!("{s:?} is neither RFC 3339 nor YYYY-MM-DD"))
    }

    pub fn to_rfc3339(self) -> String {
        DateTime::from_timestamp(self.0, 0)
            .map(|d| d.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
            .unwrap_or_else(|| self.0.to_string())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Timestamp::parse(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub symbol: String,
    pub start: Timestamp,
    /// Exclusive.
    pub end: Timestamp,
    #[serde(default = "default_interval")]
    pub interval_secs: i64,
    #[serde(default = "default_equity")]
    pub initial_equity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub memory: bool,
    /// Label for reports.
    #[serde(default = "default_provider")]
    pub provider: String,
    /// Label for reports.
    #[serde(default = "default_model")]
    pub model: String,
}

fn default_interval() -> i64 {
    900
}
fn default_equity() -> f64 {
    10_000.0
}
fn yes() -> bool {
    true
}
fn default_provider() -> String {
    "stub".into()
}
fn default_model() -> String {
    "rules-v1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// 15-minute candles, including any warm-up history before `run.start`.
    pub m15: PathBuf,
    /// Hourly candles; aggregated from `m15` when absent.
    #[serde(default)]
    pub h1: Option<PathBuf>,
    #[serde(default)]
    pub evidence: Option<PathBuf>,
    /// Recorded ticks; pseudo-ticks from bars are used when absent.
    #[serde(default)]
    pub ticks: Option<PathBuf>,
    #[serde(default)]
    pub gaps: GapPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `n` evenly spaced epochs over the range.
    FixedCount { n: usize },
    /// Every bar whose timestamp is a multiple of `every_secs`.
    Cadence { every_secs: i64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::FixedCount { n: 122 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Stub,
    /// Never trades.
    Abstain,
    Remote(EndpointConfig),
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Stub
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub k: usize,
    pub alpha: f64,
    pub half_life_days: f64,
    pub capacity: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { k: DEFAULT_K, alpha: DEFAULT_ALPHA, half_life_days: 30.0, capacity: 1_000 }
    }
}

impl MemorySection {
    pub fn half_life_secs(&self) -> i64 {
        (self.half_life_days * DAY_SECS as f64).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionSection {
    pub band_bps: f64,
}

impl Default for ReflectionSection {
    fn default() -> Self {
        Self { band_bps: DEFAULT_BAND_BPS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    pub slippage_bps: f64,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self { slippage_bps: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub snapshot: SnapshotConfig,
    #[serde(default)]
    pub regime: ThresholdTable,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub shock: ShockConfig,
    #[serde(default)]
    pub reflection: ReflectionSection,
    #[serde(default)]
    pub execution: ExecutionSection,
}

impl RunConfig {
    /// Parse and validate; relative data paths are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BacktestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BacktestError::Io(path.into(), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.m15);
        for p in [&mut cfg.data.h1, &mut cfg.data.evidence, &mut cfg.data.ticks].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, BacktestError> {
        let cfg: Self = toml::from_str(text).map_err(|e| BacktestError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: String| Err(BacktestError::Config(m));
        let r = &self.run;
        if r.interval_secs <= 0 || DAY_SECS % r.interval_secs != 0 || 3600 % r.interval_secs != 0 {
            return bad(format!("interval_secs {} must divide one hour", r.interval_secs));
        }
        if r.end <= r.start {
            return bad("run.end must be after run.start".into());
        }
        if (r.start.0 % r.interval_secs) != 0 || (r.end.0 % r.interval_secs) != 0 {
            return bad("run.start and run.end must be aligned to the bar interval".into());
        }
        if !(r.initial_equity > 0.0) {
            return bad(format!("initial_equity must be positive, got {}", r.initial_equity));
        }
        match self.schedule {
            ScheduleSpec::FixedCount { n: 0 } => return bad("schedule n must be at least 1".into()),
            ScheduleSpec::Cadence { every_secs } if every_secs <= 0 || every_secs % r.interval_secs != 0 => {
                return bad(format!("cadence {every_secs}s must be a positive multiple of the bar interval"));
            }
            _ => {}
        }
        if let PolicyConfig::Remote(ep) = &self.policy {
            ep.validate().map_err(|e| BacktestError::Config(e.to_string()))?;
        }
        let m = &self.memory;
        if !(0.0..=1.0).contains(&m.alpha) || m.capacity == 0 || m.half_life_secs() <= 0 {
            return bad("memory needs alpha in [0, 1], capacity >= 1 and a positive half-life".into());
        }
        if !(self.reflection.band_bps >= 0.0) {
            return bad("reflection.band_bps must be non-negative".into());
        }
        if !(self.execution.slippage_bps >= 0.0) {
            return bad("execution.slippage_bps must be non-negative".into());
        }
        if self.snapshot.evidence_lookback_secs <= 0 {
            return bad("snapshot.evidence_lookback_secs must be positive".into());
        }
        self.risk.validate().map_err(|e| BacktestError::Config(e.to_string()))?;
        self.costs.validate().map_err(|e| BacktestError::Config(e.to_string()))?;
        self.shock.validate().map_err(|e| BacktestError::Config(e.to_string()))?;
        Ok(())
    }

    /// Bars the configured range holds when complete.
    pub fn range_bars(&self) -> usize {
        ((self.run.end.0 - self.run.start.0) / self.run.interval_secs) as usize
    }

    /// Short identifier for output directories.
    pub fn run_name(&self) -> String {
        let clean = |s: &str| {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect::<String>()
        };
        format!(
            "{}__{}__mem-{}",
            clean(&self.run.provider),
            clean(&self.run.model),
            if self.run.memory { "on" } else { "off" }
        )
    }
}

//! Regime classification and the regime-dependent threshold table.
//!
//! The rule set is deterministic:
//!
//! * volatility state from the percentile rank of ATR14/close inside the
//!   trailing window (`< 30` LOW, `> 70` HIGH, else NORMAL);
//! * RISK_ON iff `ema21 > ema50 > ema200`, sentiment `>= 0` and volatility is
//!   not HIGH; RISK_OFF iff `ema21 < ema50` and (sentiment `< -0.3` or
//!   volatility HIGH); NEUTRAL otherwise;
//! * THIN liquidity iff the current session volume is below 40% of the
//!   median of the same clock hour over the trailing window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::indicators::IndicatorSet;

pub const LOW_VOL_PERCENTILE: f64 = 30.0;
pub const HIGH_VOL_PERCENTILE: f64 = 70.0;
pub const THIN_LIQUIDITY_FRACTION: f64 = 0.4;
pub const RISK_OFF_SENTIMENT: f64 = -0.3;
/// Length of the trailing volatility and liquidity windows.
pub const TRAILING_DAYS: i64 = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegimeError {
    #[error("regime warm-up incomplete: {0}")]
    WarmUp(String),
    #[error("threshold table: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegimeLabel {
    RiskOn,
    RiskOff,
    Neutral,
}

impl RegimeLabel {
    pub const ALL: [RegimeLabel; 3] = [RegimeLabel::RiskOn, RegimeLabel::Neutral, RegimeLabel::RiskOff];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::RiskOn => "RISK_ON",
            RegimeLabel::RiskOff => "RISK_OFF",
            RegimeLabel::Neutral => "NEUTRAL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VolatilityState {
    Low,
    Normal,
    High,
}

impl VolatilityState {
    pub const ALL: [VolatilityState; 3] = [VolatilityState::Low, VolatilityState::Normal, VolatilityState::High];

    pub fn as_str(self) -> &'static str {
        match self {
            VolatilityState::Low => "LOW",
            VolatilityState::Normal => "NORMAL",
            VolatilityState::High => "HIGH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LiquidityState {
    Deep,
    Thin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSnapshot {
    pub label: RegimeLabel,
    pub volatility_state: VolatilityState,
    /// In `[-1, 1]`.
    pub macro_sentiment: f64,
    pub liquidity_state: LiquidityState,
}

/// Volume observations for the liquidity rule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VolumeWindow {
    /// Volume traded in the current session hour.
    pub current: f64,
    /// The same clock hour on each trailing day.
    pub same_hour_history: Vec<f64>,
}

/// Percentile rank of the last element of `window`: the share of window
/// values strictly below it, in `[0, 100)`.
pub fn percentile_rank(window: &[f64]) -> Option<f64> {
    let &cur = window.last()?;
    let below = window.iter().filter(|&&x| x < cur).count();
    Some(100.0 * below as f64 / window.len() as f64)
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Classify the regime at one epoch.
///
/// `volatility` holds ATR14/close over the trailing window with the current
/// value last. `sentiment` is clamped into `[-1, 1]`.
pub fn classify_regime(
    ind: &IndicatorSet,
    volatility: &[f64],
    sentiment: f64,
    volume: &VolumeWindow,
) -> Result<RegimeSnapshot, RegimeError> {
    let pct = percentile_rank(volatility)
        .ok_or_else(|| RegimeError::WarmUp("empty volatility window".into()))?;
    let volatility_state = if pct < LOW_VOL_PERCENTILE {
        VolatilityState::Low
    } else if pct > HIGH_VOL_PERCENTILE {
        VolatilityState::High
    } else {
        VolatilityState::Normal
    };
    let macro_sentiment = sentiment.clamp(-1.0, 1.0);
    let high = volatility_state == VolatilityState::High;
    let label = if ind.ema21 > ind.ema50 && ind.ema50 > ind.ema200 && macro_sentiment >= 0.0 && !high {
        RegimeLabel::RiskOn
    } else if ind.ema21 < ind.ema50 && (macro_sentiment < RISK_OFF_SENTIMENT || high) {
        RegimeLabel::RiskOff
    } else {
        RegimeLabel::Neutral
    };
    let typical = median(&volume.same_hour_history)
        .ok_or_else(|| RegimeError::WarmUp("no same-hour volume history".into()))?;
    let liquidity_state = if volume.current < THIN_LIQUIDITY_FRACTION * typical {
        LiquidityState::Thin
    } else {
        LiquidityState::Deep
    };
    Ok(RegimeSnapshot { label, volatility_state, macro_sentiment, liquidity_state })
}

/// Thresholds and sizing knobs for one regime cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub theta_adopt: f64,
    pub theta_hold: f64,
    pub theta_exec: f64,
    pub stop_atr_multiple: f64,
    pub size_scalar: f64,
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(unit(self.theta_adopt) && unit(self.theta_hold) && unit(self.theta_exec)) {
            return Err("thresholds must lie in (0, 1)".into());
        }
        if self.theta_adopt <= self.theta_hold {
            return Err(format!(
                "theta_adopt {} must exceed theta_hold {}",
                self.theta_adopt, self.theta_hold
            ));
        }
        if self.theta_exec < self.theta_hold {
            return Err(format!(
                "theta_exec {} below theta_hold {}",
                self.theta_exec, self.theta_hold
            ));
        }
        if !(self.stop_atr_multiple.is_finite() && self.stop_atr_multiple > 0.0) {
            return Err("stop_atr_multiple must be positive".into());
        }
        if !(self.size_scalar > 0.0 && self.size_scalar <= 1.0) {
            return Err("size_scalar must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// A row of the threshold table as written in the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub label: RegimeLabel,
    pub volatility: VolatilityState,
    #[serde(flatten)]
    pub thresholds: RegimeThresholds,
}

/// A complete, validated label x volatility threshold table.
///
/// Construction fails unless every cell is present and valid, so lookups
/// during a run cannot fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ThresholdRow>", into = "Vec<ThresholdRow>")]
pub struct ThresholdTable {
    cells: BTreeMap<(RegimeLabel, VolatilityState), RegimeThresholds>,
}

impl ThresholdTable {
    pub fn new(rows: Vec<ThresholdRow>) -> Result<Self, RegimeError> {
        let mut cells = BTreeMap::new();
        for row in rows {
            row.thresholds.validate().map_err(|e| {
                RegimeError::Config(format!(
                    "{}/{}: {e}",
                    row.label.as_str(),
                    row.volatility.as_str()
                ))
            })?;
            if cells.insert((row.label, row.volatility), row.thresholds).is_some() {
                return Err(RegimeError::Config(format!(
                    "duplicate row {}/{}",
                    row.label.as_str(),
                    row.volatility.as_str()
                )));
            }
        }
        for label in RegimeLabel::ALL {
            for vol in VolatilityState::ALL {
                if !cells.contains_key(&(label, vol)) {
                    return Err(RegimeError::Config(format!(
                        "missing row {}/{}",
                        label.as_str(),
                        vol.as_str()
                    )));
                }
            }
        }
        Ok(Self { cells })
    }

    pub fn rows(&self) -> Vec<ThresholdRow> {
        self.cells
            .iter()
            .map(|(&(label, volatility), &thresholds)| ThresholdRow { label, volatility, thresholds })
            .collect()
    }
}

impl TryFrom<Vec<ThresholdRow>> for ThresholdTable {
    type Error = RegimeError;

    fn try_from(rows: Vec<ThresholdRow>) -> Result<Self, Self::Error> {
        Self::new(rows)
    }
}

impl From<ThresholdTable> for Vec<ThresholdRow> {
    fn from(t: ThresholdTable) -> Self {
        t.rows()
    }
}

impl Default for ThresholdTable {
    fn default() -> Self {
        use RegimeLabel::*;
        use VolatilityState::*;
        let row = |label, volatility, a, h, e, stop, size| ThresholdRow {
            label,
            volatility,
            thresholds: RegimeThresholds {
                theta_adopt: a,
                theta_hold: h,
                theta_exec: e,
                stop_atr_multiple: stop,
                size_scalar: size,
            },
        };
        Self::new(vec![
            row(RiskOn, Low, 0.45, 0.30, 0.50, 1.25, 1.0),
            row(RiskOn, Normal, 0.60, 0.40, 0.55, 1.5, 1.0),
            row(RiskOn, High, 0.65, 0.45, 0.60, 2.0, 0.6),
            row(Neutral, Low, 0.50, 0.35, 0.55, 1.5, 0.8),
            row(Neutral, Normal, 0.55, 0.40, 0.60, 1.75, 0.7),
            row(Neutral, High, 0.65, 0.45, 0.65, 2.25, 0.5),
            row(RiskOff, Low, 0.65, 0.45, 0.65, 2.0, 0.5),
            row(RiskOff, Normal, 0.70, 0.50, 0.65, 2.25, 0.45),
            row(RiskOff, High, 0.75, 0.55, 0.70, 2.5, 0.4),
        ])
        .expect("default threshold table is valid")
    }
}

pub fn thresholds_for(r: &RegimeSnapshot, table: &ThresholdTable) -> RegimeThresholds {
    table.cells[&(r.label, r.volatility_state)]
}

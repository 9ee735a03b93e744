//! The strategic tier: snapshot assembly, policy decisions, hysteresis on the
//! directional bias and the execution gate.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evidence::{build_evidence, EvidenceDocument, EvidenceItem};
use crate::indicators::{IndicatorSet, IndicatorTable};
use crate::market_data::{window_at, Bar, CandleSeries};
use crate::memory::{Experience, DAY_SECS};
use crate::model_gateway::{DecisionPolicy, FallbackCounter};
use crate::regime::{classify_regime, RegimeSnapshot, RegimeThresholds, VolumeWindow, TRAILING_DAYS};

pub const BIAS_REFRESH_SECS: i64 = 8 * 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Bias {
    Long,
    Flat,
}

impl Bias {
    pub fn as_str(self) -> &'static str {
        match self {
            Bias::Long => "LONG",
            Bias::Flat => "FLAT",
        }
    }
}

impl fmt::Display for Bias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTuple {
    pub bias: Bias,
    pub confidence: f64,
    pub expected_move_bps: f64,
    pub rationale: String,
    pub p_long: f64,
    pub trigger_fired: bool,
}

impl DecisionTuple {
    /// The conservative tuple substituted for any invalid policy output.
    pub fn fallback() -> Self {
        Self {
            bias: Bias::Flat,
            confidence: 0.0,
            expected_move_bps: 0.0,
            rationale: "fallback".into(),
            p_long: 0.5,
            trigger_fired: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if !(0.0..=1.0).contains(&self.p_long) {
            return Err(format!("p_long {} outside [0, 1]", self.p_long));
        }
        if !self.expected_move_bps.is_finite() {
            return Err("expected_move_bps is not finite".into());
        }
        Ok(())
    }

    pub fn score(&self) -> f64 {
        self.confidence * self.p_long
    }
}

/// Everything the policy sees at one decision epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSnapshot {
    pub t: i64,
    pub o15: Vec<Bar>,
    /// Completed hourly bars.
    pub o1h: Vec<Bar>,
    pub ind: IndicatorSet,
    pub evidence: EvidenceDocument,
    pub regime: RegimeSnapshot,
    pub prev_close: f64,
    pub prev_ema21: f64,
}

impl MarketSnapshot {
    pub fn close(&self) -> f64 {
        self.o15.last().map_or(f64::NAN, |b| b.close)
    }

    /// Hex SHA-256 of the snapshot's compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("snapshot serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasState {
    pub current: Bias,
    pub last_refresh: i64,
    pub adopted_at: i64,
}

impl Default for BiasState {
    /// Flat and due for refresh at the first epoch.
    fn default() -> Self {
        Self { current: Bias::Flat, last_refresh: i64::MIN, adopted_at: i64::MIN }
    }
}

/// Dual-threshold update of the bias on `s = confidence * p_long`.
pub fn hysteresis_update(prev: BiasState, a: &DecisionTuple, th: &RegimeThresholds, t: i64) -> BiasState {
    let s = a.score();
    let mut next = BiasState { last_refresh: t, ..prev };
    if s >= th.theta_adopt && a.trigger_fired {
        next.current = Bias::Long;
        if prev.current != Bias::Long {
            next.adopted_at = t;
        }
    } else if s < th.theta_hold {
        next.current = Bias::Flat;
    }
    next
}

pub fn refresh_due(state: &BiasState, t: i64, period: i64) -> bool {
    t.saturating_sub(state.last_refresh) >= period
}

pub fn gate_execution(a: &DecisionTuple, th: &RegimeThresholds) -> bool {
    a.confidence >= th.theta_exec
}

/// Ask the policy for a decision, substituting the fallback tuple (and
/// counting it) when the policy fails.
pub fn decide(
    d: &MarketSnapshot,
    experiences: &[&Experience],
    policy: &mut dyn DecisionPolicy,
    fallbacks: &mut FallbackCounter,
) -> (DecisionTuple, Option<String>) {
    match policy.decide(d, experiences) {
        Ok(tuple) => match tuple.validate() {
            Ok(()) => (tuple, None),
            Err(msg) => {
                fallbacks.record(crate::model_gateway::FallbackReason::Schema);
                (DecisionTuple::fallback(), Some(format!("SCHEMA: {msg}")))
            }
        },
        Err(failure) => {
            fallbacks.record(failure.reason);
            (DecisionTuple::fallback(), Some(failure.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapshotConfig {
    pub evidence_cap: usize,
    pub evidence_lookback_secs: i64,
    /// 15-minute bars carried in the snapshot.
    pub m15_window: usize,
    /// Hourly bars carried in the snapshot.
    pub h1_window: usize,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self { evidence_cap: 20, evidence_lookback_secs: DAY_SECS, m15_window: 96, h1_window: 24 }
    }
}

/// An epoch that cannot be evaluated yet.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("skip epoch {t}: {reason}")]
pub struct SkipEpoch {
    pub t: i64,
    pub reason: String,
}

/// Loaded data plus precomputed causal indicators, from which snapshots are
/// assembled.
#[derive(Debug, Clone)]
pub struct MarketContext {
    pub m15: CandleSeries,
    pub h1: CandleSeries,
    pub table: IndicatorTable,
    pub evidence: Vec<EvidenceItem>,
    pub cfg: SnapshotConfig,
}

impl MarketContext {
    pub fn new(
        m15: CandleSeries,
        h1: CandleSeries,
        evidence: Vec<EvidenceItem>,
        cfg: SnapshotConfig,
    ) -> Result<Self, crate::indicators::IndicatorError> {
        let table = IndicatorTable::build(&m15, &h1)?;
        Ok(Self { m15, h1, table, evidence, cfg })
    }

    fn bars_per_day(&self) -> usize {
        (DAY_SECS / self.m15.interval) as usize
    }

    fn bars_per_hour(&self) -> usize {
        (3600 / self.m15.interval).max(1) as usize
    }

    /// Number of 15-minute bars needed before index `i` can be evaluated
    /// for the regime.
    pub fn regime_history(&self) -> usize {
        TRAILING_DAYS as usize * self.bars_per_day()
    }

    /// True when a snapshot can be built at bar index `i`.
    pub fn is_ready(&self, i: usize) -> bool {
        i >= self.regime_history() && i >= 1 && self.table.get(i).is_ok() && self.table.get(i - 1).is_ok()
    }

    /// Assemble the snapshot for the bar opened at `t` from data with
    /// timestamps at or before `t` only.
    pub fn build_snapshot(&self, t: i64) -> Result<MarketSnapshot, SkipEpoch> {
        let skip = |reason: String| SkipEpoch { t, reason };
        let idx = self.m15.index_of(t).ok_or_else(|| skip("no bar at this timestamp".into()))?;
        let ind = self.table.get(idx).map_err(|e| skip(e.to_string()))?;
        if idx == 0 {
            return Err(skip("no previous bar".into()));
        }
        let prev = self.table.get(idx - 1).map_err(|e| skip(e.to_string()))?;

        let history = self.regime_history();
        if idx < history {
            return Err(skip(format!("regime warm-up needs {history} bars, have {}", idx + 1)));
        }
        let volatility = &self.table.atr_ratio[idx + 1 - history..=idx];

        let hour = self.bars_per_hour();
        let day = self.bars_per_day();
        let hour_volume = |end: usize| self.m15.bars[end + 1 - hour..=end].iter().map(|b| b.volume).sum::<f64>();
        let volume = VolumeWindow {
            current: hour_volume(idx),
            same_hour_history: (1..=TRAILING_DAYS as usize)
                .filter(|d| idx >= d * day + hour - 1)
                .map(|d| hour_volume(idx - d * day))
                .collect(),
        };

        let lookback = self.cfg.evidence_lookback_secs;
        let provisional = RegimeSnapshot {
            label: crate::regime::RegimeLabel::Neutral,
            volatility_state: crate::regime::VolatilityState::Normal,
            macro_sentiment: 0.0,
            liquidity_state: crate::regime::LiquidityState::Deep,
        };
        // the regime depends on the evidence sentiment, the evidence summary
        // on the regime; sentiment first, then render with the final regime
        let sentiment = build_evidence(&self.evidence, t, &ind, &provisional, self.cfg.evidence_cap, lookback)
            .aggregate_sentiment;
        let regime = classify_regime(&ind, volatility, sentiment, &volume).map_err(|e| skip(e.to_string()))?;
        let evidence = build_evidence(&self.evidence, t, &ind, &regime, self.cfg.evidence_cap, lookback);

        let o15 = window_at(&self.m15, t, self.cfg.m15_window)
            .map_err(|e| skip(e.to_string()))?
            .bars
            .to_vec();
        let done = self.h1.bars.partition_point(|b| b.ts + self.h1.interval <= t + self.m15.interval);
        let o1h = self.h1.bars[done.saturating_sub(self.cfg.h1_window)..done].to_vec();

        Ok(MarketSnapshot {
            t,
            o15,
            o1h,
            ind,
            evidence,
            regime,
            prev_close: self.m15.bars[idx - 1].close,
            prev_ema21: prev.ema21,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::resample;
    use crate::regime::ThresholdTable;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn th(adopt: f64, hold: f64) -> RegimeThresholds {
        RegimeThresholds { theta_adopt: adopt, theta_hold: hold, theta_exec: 0.55, stop_atr_multiple: 1.5, size_scalar: 1.0 }
    }

    fn tuple(c: f64, p: f64, trigger: bool) -> DecisionTuple {
        DecisionTuple {
            bias: Bias::Long,
            confidence: c,
            expected_move_bps: 50.0,
            rationale: String::new(),
            p_long: p,
            trigger_fired: trigger,
        }
    }

    fn state(b: Bias) -> BiasState {
        BiasState { current: b, last_refresh: 0, adopted_at: 0 }
    }

    #[test]
    fn hysteresis_branches() {
        let t = th(0.60, 0.40);
        let s = hysteresis_update(state(Bias::Flat), &tuple(0.8, 0.9, true), &t, 100);
        assert_eq!((s.current, s.adopted_at, s.last_refresh), (Bias::Long, 100, 100));
        assert_eq!(hysteresis_update(state(Bias::Long), &tuple(0.5, 0.6, true), &t, 1).current, Bias::Flat);
        assert_eq!(hysteresis_update(state(Bias::Long), &tuple(0.5, 1.0, false), &t, 1).current, Bias::Long);
        assert_eq!(hysteresis_update(state(Bias::Flat), &tuple(0.8, 0.9, false), &t, 1).current, Bias::Flat);
    }

    #[test]
    fn refresh_boundaries() {
        let s = state(Bias::Flat);
        assert!(!refresh_due(&s, 0, BIAS_REFRESH_SECS));
        assert!(refresh_due(&s, 8 * 3600, BIAS_REFRESH_SECS));
        assert!(!refresh_due(&s, 8 * 3600 - 60, BIAS_REFRESH_SECS));
        assert!(refresh_due(&BiasState::default(), 0, BIAS_REFRESH_SECS));
    }

    #[test]
    fn execution_gate_is_inclusive() {
        let t = th(0.6, 0.4);
        assert!(gate_execution(&tuple(0.55, 1.0, true), &t));
        assert!(!gate_execution(&tuple(0.0, 1.0, true), &t));
        assert!(gate_execution(&tuple(1.0, 1.0, true), &t));
    }

    #[test]
    fn fallback_is_valid() {
        assert!(DecisionTuple::fallback().validate().is_ok());
        assert!(tuple(1.3, 0.5, true).validate().is_err());
    }

    proptest! {
        #[test]
        fn no_flips_inside_band(seed in any::<u64>(), start_long in any::<bool>()) {
            let t = ThresholdTable::default().rows()[4].thresholds;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = if start_long { Bias::Long } else { Bias::Flat };
            let mut s = state(first);
            for i in 0..200 {
                let target = rng.random_range(t.theta_hold..t.theta_adopt);
                let c = rng.random_range(target..=1.0);
                let p = target / c;
                let a = tuple(c, p, rng.random_bool(0.5));
                if a.score() <= t.theta_hold || a.score() >= t.theta_adopt {
                    continue;
                }
                s = hysteresis_update(s, &a, &t, i);
                prop_assert_eq!(s.current, first);
            }
        }

        #[test]
        fn adoption_survives_lower_threshold(c in 0.0f64..=1.0, p in 0.0f64..=1.0, adopt in 0.3f64..0.9, lower in 0.0f64..0.3) {
            let a = tuple(c, p, true);
            let hi = th(adopt, 0.1);
            let lo = th((adopt - lower).max(0.11), 0.1);
            if hysteresis_update(state(Bias::Flat), &a, &hi, 1).current == Bias::Long {
                prop_assert_eq!(hysteresis_update(state(Bias::Flat), &a, &lo, 1).current, Bias::Long);
            }
        }
    }

    fn synthetic_m15(days: i64, seed: u64) -> CandleSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px: f64 = 100.0;
        let bars = (0..days * 96)
            .map(|i| {
                let o = px;
                let c = o * (1.0 + rng.random_range(-0.004..0.0045));
                px = c;
                Bar {
                    ts: 1_700_000_000 - 1_700_000_000 % 86_400 + i * 900,
                    open: o,
                    high: o.max(c) * 1.001,
                    low: o.min(c) * 0.999,
                    close: c,
                    volume: rng.random_range(1.0..5.0),
                }
            })
            .collect();
        CandleSeries::new("TEST", 900, bars)
    }

    fn context(m15: CandleSeries) -> MarketContext {
        let h1 = resample(&m15, 4).unwrap();
        MarketContext::new(m15, h1, Vec::new(), SnapshotConfig::default()).unwrap()
    }

    #[test]
    fn warm_up_skips_then_builds() {
        let ctx = context(synthetic_m15(35, 1));
        let early = ctx.m15.bars[100].ts;
        assert!(ctx.build_snapshot(early).is_err());
        let t = ctx.m15.bars.last().unwrap().ts;
        let snap = ctx.build_snapshot(t).unwrap();
        assert_eq!(snap.evidence.as_of, t);
        assert_eq!(snap.o15.len(), 96);
        assert!(snap.o1h.iter().all(|b| b.ts + 3600 <= t + 900));
    }

    #[test]
    fn snapshot_ignores_future_bars() {
        let full = synthetic_m15(40, 2);
        let ctx_full = context(full.clone());
        for i in [33 * 96, 35 * 96 + 7, 39 * 96 + 1] {
            let t = full.bars[i].ts;
            let ctx_cut = context(full.truncated(t));
            let a = ctx_full.build_snapshot(t).unwrap();
            let b = ctx_cut.build_snapshot(t).unwrap();
            assert_eq!(a.digest(), b.digest());
        }
    }
}

//! Risk layer: ATR stops, fractional-Kelly sizing, the pre-trade cost gate,
//! circuit breakers and exposure/time limits.

use serde::{Deserialize, Serialize};

use crate::memory::DAY_SECS;
use crate::regime::RegimeThresholds;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RiskError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid risk configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub lp_fee_bps: f64,
    pub impact_bps: f64,
    pub spread_bps: f64,
    pub mev_bps: f64,
    /// Flat network fee per order, in quote currency.
    pub gas_quote: f64,
    pub safety_margin_bps: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { lp_fee_bps: 7.5, impact_bps: 2.0, spread_bps: 1.0, mev_bps: 0.0, gas_quote: 0.0, safety_margin_bps: 10.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), RiskError> {
        let parts = [
            ("lp_fee_bps", self.lp_fee_bps),
            ("impact_bps", self.impact_bps),
            ("spread_bps", self.spread_bps),
            ("mev_bps", self.mev_bps),
            ("gas_quote", self.gas_quote),
            ("safety_margin_bps", self.safety_margin_bps),
        ];
        match parts.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(RiskError::Config(format!("{name} must be a non-negative number, got {v}"))),
            None => Ok(()),
        }
    }

    /// All frictional costs of one order of `notional`, in basis points.
    pub fn total_bps(&self, notional: f64) -> f64 {
        self.lp_fee_bps + self.impact_bps + self.spread_bps + self.mev_bps + 10_000.0 * self.gas_quote / notional
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    pub kelly_fraction: f64,
    pub max_position_frac: f64,
    pub daily_loss_halt_frac: f64,
    pub max_drawdown_halt_frac: f64,
    pub per_asset_exposure_cap: f64,
    pub max_holding_secs: i64,
    /// Minimum volume over the last hour for holding a position.
    pub liquidity_floor: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            kelly_fraction: 0.5,
            max_position_frac: 0.25,
            daily_loss_halt_frac: 0.03,
            max_drawdown_halt_frac: 0.15,
            per_asset_exposure_cap: 0.5,
            max_holding_secs: 72 * 3600,
            liquidity_floor: 0.0,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), RiskError> {
        let unit = |name: &str, v: f64, closed: bool| {
            let ok = v > 0.0 && if closed { v <= 1.0 } else { v < 1.0 };
            if ok {
                Ok(())
            } else {
                Err(RiskError::Config(format!("{name} = {v} out of range")))
            }
        };
        unit("kelly_fraction", self.kelly_fraction, true)?;
        unit("max_position_frac", self.max_position_frac, true)?;
        unit("daily_loss_halt_frac", self.daily_loss_halt_frac, false)?;
        unit("max_drawdown_halt_frac", self.max_drawdown_halt_frac, false)?;
        unit("per_asset_exposure_cap", self.per_asset_exposure_cap, true)?;
        if self.max_holding_secs <= 0 {
            return Err(RiskError::Config("max_holding_secs must be positive".into()));
        }
        if !(self.liquidity_floor >= 0.0) {
            return Err(RiskError::Config("liquidity_floor must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn stop_distance(atr14: f64, th: &RegimeThresholds) -> f64 {
    th.stop_atr_multiple * atr14
}

/// Fraction of equity to commit: fractional Kelly with the confidence as win
/// probability and `expected_move / stop` as the payoff ratio.
pub fn kelly_size(confidence: f64, expected_move_bps: f64, stop_bps: f64, cfg: &RiskConfig, size_scalar: f64) -> Result<f64, RiskError> {
    if !(stop_bps > 0.0) {
        return Err(RiskError::Argument(format!("stop distance must be positive, got {stop_bps} bps")));
    }
    if expected_move_bps <= 0.0 {
        return Ok(0.0);
    }
    let p = confidence.clamp(0.0, 1.0);
    let b = expected_move_bps / stop_bps;
    let full = ((b * p - (1.0 - p)) / b).max(0.0);
    Ok((cfg.kelly_fraction * size_scalar * full).min(cfg.max_position_frac))
}

/// Both sides of the cost-gate comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostGate {
    pub pass: bool,
    pub expected_move_bps: f64,
    pub total_cost_bps: f64,
    pub safety_margin_bps: f64,
}

pub fn cost_gate(expected_move_bps: f64, notional: f64, costs: &CostModel) -> CostGate {
    let total_cost_bps = costs.total_bps(notional);
    CostGate {
        pass: notional > 0.0 && expected_move_bps > total_cost_bps + costs.safety_margin_bps,
        expected_move_bps,
        total_cost_bps,
        safety_margin_bps: costs.safety_margin_bps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HaltReason {
    DailyLoss { change: f64 },
    Drawdown { drawdown: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TradingStatus {
    Active,
    Halted(HaltReason),
}

impl TradingStatus {
    pub fn is_halted(&self) -> bool {
        matches!(self, TradingStatus::Halted(_))
    }
}

pub fn day_start(t: i64) -> i64 {
    t - t.rem_euclid(DAY_SECS)
}

/// Breaker state over a time-stamped equity curve evaluated at `now`.
///
/// The daily reference is the last equity recorded before the UTC day
/// containing `now` began, or the first value of that day when none exists.
pub fn circuit_breaker_check(curve: &[(i64, f64)], cfg: &RiskConfig, now: i64) -> TradingStatus {
    let Some(&(_, equity_now)) = curve.iter().rev().find(|(t, _)| *t <= now) else {
        return TradingStatus::Active;
    };
    let mut peak = f64::NEG_INFINITY;
    let mut max_dd: f64 = 0.0;
    for &(_, e) in curve.iter().filter(|(t, _)| *t <= now) {
        peak = peak.max(e);
        max_dd = max_dd.max((peak - e) / peak);
    }
    let open = day_start(now);
    let day_open = curve
        .iter()
        .rev()
        .find(|(t, _)| *t < open)
        .or_else(|| curve.iter().find(|(t, _)| *t >= open))
        .map(|&(_, e)| e)
        .unwrap_or(equity_now);
    evaluate(equity_now, day_open, max_dd, cfg)
}

fn evaluate(equity: f64, day_open: f64, max_dd: f64, cfg: &RiskConfig) -> TradingStatus {
    if max_dd >= cfg.max_drawdown_halt_frac {
        return TradingStatus::Halted(HaltReason::Drawdown { drawdown: max_dd });
    }
    let change = equity / day_open - 1.0;
    if change <= -cfg.daily_loss_halt_frac {
        return TradingStatus::Halted(HaltReason::DailyLoss { change });
    }
    TradingStatus::Active
}

/// Incremental form of [`circuit_breaker_check`] for an append-only curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitBreaker {
    peak: f64,
    max_dd: f64,
    last: Option<(i64, f64)>,
    day: i64,
    day_open: f64,
}

impl Default for CircuitBreaker {
    fn default() -> Self {
        Self { peak: f64::NEG_INFINITY, max_dd: 0.0, last: None, day: i64::MIN, day_open: f64::NAN }
    }
}

impl CircuitBreaker {
    pub fn observe(&mut self, t: i64, equity: f64, cfg: &RiskConfig) -> TradingStatus {
        let d = day_start(t);
        if d != self.day {
            self.day = d;
            self.day_open = self.last.map_or(equity, |(_, e)| e);
        }
        self.peak = self.peak.max(equity);
        self.max_dd = self.max_dd.max((self.peak - equity) / self.peak);
        self.last = Some((t, equity));
        evaluate(equity, self.day_open, self.max_dd, cfg)
    }

    /// Forget the drawdown history, as after a manual reset.
    pub fn reset_drawdown(&mut self) {
        self.peak = self.last.map_or(f64::NEG_INFINITY, |(_, e)| e);
        self.max_dd = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenPosition {
    pub id: u64,
    pub qty: f64,
    pub entry_t: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExposureDecision {
    Allow,
    /// Candidate reduced to `qty`, taking exposure to `fraction` of equity.
    Shrink { qty: f64, fraction: f64 },
    ForceClose(Vec<u64>),
}

/// Exposure cap on a candidate buy of `candidate_qty`, plus time and
/// liquidity stops on open positions. Forced closes take precedence.
pub fn exposure_and_time_checks(
    positions: &[OpenPosition],
    candidate_qty: f64,
    price: f64,
    equity: f64,
    cfg: &RiskConfig,
    now: i64,
    recent_volume: f64,
) -> ExposureDecision {
    let illiquid = recent_volume < cfg.liquidity_floor;
    let forced: Vec<u64> = positions
        .iter()
        .filter(|p| illiquid || now - p.entry_t >= cfg.max_holding_secs)
        .map(|p| p.id)
        .collect();
    if !forced.is_empty() {
        return ExposureDecision::ForceClose(forced);
    }
    if candidate_qty <= 0.0 || equity <= 0.0 {
        return ExposureDecision::Allow;
    }
    let held: f64 = positions.iter().map(|p| p.qty).sum();
    let limit_qty = cfg.per_asset_exposure_cap * equity / price;
    if held + candidate_qty <= limit_qty {
        ExposureDecision::Allow
    } else {
        let qty = (limit_qty - held).max(0.0);
        ExposureDecision::Shrink { qty, fraction: (held + qty) * price / equity }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::{RegimeLabel, RegimeSnapshot, ThresholdTable, VolatilityState, LiquidityState, thresholds_for};
    use proptest::prelude::*;

    fn cfg(fraction: f64, cap: f64) -> RiskConfig {
        RiskConfig { kelly_fraction: fraction, max_position_frac: cap, ..RiskConfig::default() }
    }

    #[test]
    fn stops() {
        let t = ThresholdTable::default();
        let th = |label| {
            thresholds_for(
                &RegimeSnapshot { label, volatility_state: VolatilityState::Normal, macro_sentiment: 0.0, liquidity_state: LiquidityState::Deep },
                &t,
            )
        };
        let on = th(RegimeLabel::RiskOn);
        assert_eq!(stop_distance(0.0, &on), 0.0);
        assert_eq!(stop_distance(2.0, &RegimeThresholds { stop_atr_multiple: 1.5, ..on }), 3.0);
        assert!(stop_distance(2.0, &th(RegimeLabel::RiskOff)) > stop_distance(2.0, &on));
    }

    #[test]
    fn kelly_examples() {
        assert_eq!(kelly_size(0.5, 10.0, 10.0, &cfg(0.5, 1.0), 1.0).unwrap(), 0.0);
        assert!((kelly_size(0.6, 10.0, 10.0, &cfg(0.5, 1.0), 1.0).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(kelly_size(0.9, 20.0, 10.0, &cfg(0.5, 0.25), 1.0).unwrap(), 0.25);
        assert!(kelly_size(0.9, 20.0, 0.0, &cfg(0.5, 0.25), 1.0).is_err());
    }

    #[test]
    fn cost_gate_examples() {
        let costs = CostModel { lp_fee_bps: 5.0, impact_bps: 5.0, spread_bps: 5.0, mev_bps: 3.0, gas_quote: 0.02, safety_margin_bps: 10.0 };
        let g = cost_gate(25.0, 1_000.0, &costs);
        assert!(!g.pass);
        assert!((g.total_cost_bps + g.safety_margin_bps - 28.2).abs() < 1e-9);
        assert!(cost_gate(50.0, 1_000.0, &costs).pass);
        assert!(!cost_gate(0.0, 1_000.0, &CostModel { lp_fee_bps: 0.0, impact_bps: 0.0, spread_bps: 0.0, mev_bps: 0.0, gas_quote: 0.0, safety_margin_bps: 0.0 }).pass);
    }

    #[test]
    fn breaker_examples() {
        let c = RiskConfig { daily_loss_halt_frac: 0.03, max_drawdown_halt_frac: 0.10, ..RiskConfig::default() };
        let day = 20_000 * DAY_SECS;
        let curve = [(day - 900, 10_000.0), (day, 9_800.0), (day + 900, 9_650.0)];
        match circuit_breaker_check(&curve, &c, day + 900) {
            TradingStatus::Halted(HaltReason::DailyLoss { change }) => assert!((change + 0.035).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        let flat = [(day, 10_000.0), (day + 900, 10_000.0)];
        assert_eq!(circuit_breaker_check(&flat, &c, day + 900), TradingStatus::Active);
        let dd = [(day, 10_000.0), (day + 900, 11_000.0), (day + 2 * DAY_SECS, 9_900.0)];
        let c = RiskConfig { daily_loss_halt_frac: 0.5, ..c };
        assert!(matches!(
            circuit_breaker_check(&dd, &c, day + 2 * DAY_SECS),
            TradingStatus::Halted(HaltReason::Drawdown { drawdown }) if drawdown == 0.1
        ));
    }

    #[test]
    fn daily_halt_clears_next_day() {
        let c = RiskConfig::default();
        let day = 100 * DAY_SECS;
        let mut b = CircuitBreaker::default();
        assert!(!b.observe(day, 10_000.0, &c).is_halted());
        assert!(b.observe(day + 900, 9_690.0, &c).is_halted());
        assert!(!b.observe(day + DAY_SECS, 9_690.0, &c).is_halted());
    }

    #[test]
    fn exposure_examples() {
        let c = RiskConfig { per_asset_exposure_cap: 0.5, max_holding_secs: 3_600, ..RiskConfig::default() };
        assert_eq!(exposure_and_time_checks(&[], 10.0, 100.0, 10_000.0, &c, 0, 1.0), ExposureDecision::Allow);
        match exposure_and_time_checks(&[], 60.0, 100.0, 10_000.0, &c, 0, 1.0) {
            ExposureDecision::Shrink { qty, fraction } => {
                assert!((qty - 50.0).abs() < 1e-9);
                assert!((fraction - 0.5).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let held = [OpenPosition { id: 7, qty: 1.0, entry_t: 0 }];
        assert_eq!(
            exposure_and_time_checks(&held, 0.0, 100.0, 10_000.0, &c, 3_600 + 900, 1.0),
            ExposureDecision::ForceClose(vec![7])
        );
        assert_eq!(exposure_and_time_checks(&held, 0.0, 100.0, 10_000.0, &c, 900, 1.0), ExposureDecision::Allow);
        let thin = RiskConfig { liquidity_floor: 5.0, ..c };
        assert_eq!(
            exposure_and_time_checks(&held, 0.0, 100.0, 10_000.0, &thin, 900, 1.0),
            ExposureDecision::ForceClose(vec![7])
        );
    }

    fn brute_breaker(curve: &[(i64, f64)], cfg: &RiskConfig) -> Vec<TradingStatus> {
        (0..curve.len()).map(|i| circuit_breaker_check(&curve[..=i], cfg, curve[i].0)).collect()
    }

    proptest! {
        #[test]
        fn kelly_monotone_and_capped(c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, m1 in 0.1f64..500.0, m2 in 0.1f64..500.0, s in 0.1f64..500.0) {
            let k = RiskConfig::default();
            let (clo, chi) = (c1.min(c2), c1.max(c2));
            let (mlo, mhi) = (m1.min(m2), m1.max(m2));
            let a = kelly_size(clo, mlo, s, &k, 1.0).unwrap();
            prop_assert!(a <= kelly_size(chi, mlo, s, &k, 1.0).unwrap());
            prop_assert!(a <= kelly_size(clo, mhi, s, &k, 1.0).unwrap());
            prop_assert!(a <= k.max_position_frac && a >= 0.0);
            let b = mlo / s;
            if b * clo <= 1.0 - clo {
                prop_assert_eq!(a, 0.0);
            }
        }

        #[test]
        fn streaming_breaker_matches_recomputation(steps in prop::collection::vec((1i64..20_000, 0.9f64..1.1), 1..60)) {
            let k = RiskConfig::default();
            let mut t = 50 * DAY_SECS;
            let mut e = 10_000.0;
            let mut curve = Vec::new();
            for (dt, g) in steps {
                t += dt;
                e *= g;
                curve.push((t, e));
            }
            let mut b = CircuitBreaker::default();
            let streamed: Vec<_> = curve.iter().map(|&(t, e)| b.observe(t, e, &k)).collect();
            prop_assert_eq!(streamed, brute_breaker(&curve, &k));
        }
    }
}

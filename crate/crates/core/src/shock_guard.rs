//! The tactical tier: a tick-stream monitor that detects sharp downside
//! moves and issues emergency overrides ahead of the strategic loop.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::market_data::{Bar, Tick};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShockError {
    #[error("tick at {ts_ms} ms arrived after tick at {prev_ms} ms")]
    Ordering { prev_ms: i64, ts_ms: i64 },
    #[error("invalid shock configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShockAction {
    Flatten,
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockThreshold {
    /// Fractional drop from the window high.
    DropFrac(f64),
    /// Drop of this many reference ATRs from the window high.
    AtrMultiple(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShockConfigFile", into = "ShockConfigFile")]
pub struct ShockConfig {
    pub window_ms: i64,
    pub threshold: ShockThreshold,
    pub cooldown_ms: i64,
    pub action: ShockAction,
}

impl Default for ShockConfig {
    fn default() -> Self {
        Self { window_ms: 10_000, threshold: ShockThreshold::DropFrac(0.03), cooldown_ms: 15 * 60_000, action: ShockAction::Flatten }
    }
}

impl ShockConfig {
    pub fn validate(&self) -> Result<(), ShockError> {
        if self.window_ms <= 0 {
            return Err(ShockError::Config("window must be positive".into()));
        }
        if self.cooldown_ms < 0 {
            return Err(ShockError::Config("cooldown must be non-negative".into()));
        }
        match self.threshold {
            ShockThreshold::DropFrac(f) if !(f > 0.0 && f < 1.0) => {
                Err(ShockError::Config(format!("drop_threshold {f} outside (0, 1)")))
            }
            ShockThreshold::AtrMultiple(m) if !(m > 0.0 && m.is_finite()) => {
                Err(ShockError::Config(format!("atr_multiple {m} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// On-disk form: exactly one of `drop_threshold` and `atr_multiple`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShockConfigFile {
    #[serde(default = "default_window")]
    window_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    drop_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atr_multiple: Option<f64>,
    #[serde(default = "default_cooldown")]
    cooldown_secs: f64,
    #[serde(default = "default_action")]
    action: ShockAction,
}

fn default_window() -> f64 {
    10.0
}

fn default_cooldown() -> f64 {
    900.0
}

fn default_action() -> ShockAction {
    ShockAction::Flatten
}

impl TryFrom<ShockConfigFile> for ShockConfig {
    type Error = ShockError;
    fn try_from(f: ShockConfigFile) -> Result<Self, ShockError> {
        let threshold = match (f.drop_threshold, f.atr_multiple) {
            (Some(d), None) => ShockThreshold::DropFrac(d),
            (None, Some(m)) => ShockThreshold::AtrMultiple(m),
            (None, None) => ShockThreshold::DropFrac(0.03),
            (Some(_), Some(_)) => {
                return Err(ShockError::Config("set only one of drop_threshold and atr_multiple".into()))
            }
        };
        let cfg = ShockConfig {
            window_ms: (f.window_secs * 1000.0).round() as i64,
            threshold,
            cooldown_ms: (f.cooldown_secs * 1000.0).round() as i64,
            action: f.action,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ShockConfig> for ShockConfigFile {
    fn from(c: ShockConfig) -> Self {
        let (drop_threshold, atr_multiple) = match c.threshold {
            ShockThreshold::DropFrac(d) => (Some(d), None),
            ShockThreshold::AtrMultiple(m) => (None, Some(m)),
        };
        ShockConfigFile {
            window_secs: c.window_ms as f64 / 1000.0,
            drop_threshold,
            atr_multiple,
            cooldown_secs: c.cooldown_ms as f64 / 1000.0,
            action: c.action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockEvent {
    pub detected_at: i64,
    pub window_high: f64,
    pub trigger_price: f64,
    pub magnitude: f64,
    pub action_taken: ShockAction,
}

/// Rolling-window maximum over a time-ordered stream.
#[derive(Debug, Clone, Default)]
pub struct RollingMax {
    window_ms: i64,
    /// Decreasing prices; the front is the window maximum.
    deque: VecDeque<(i64, f64)>,
}

impl RollingMax {
    pub fn new(window_ms: i64) -> Self {
        Self { window_ms, deque: VecDeque::new() }
    }

    /// Add an observation and return the maximum over `(ts - window, ts]`.
    pub fn push(&mut self, ts_ms: i64, price: f64) -> f64 {
        while self.deque.back().is_some_and(|&(_, p)| p <= price) {
            self.deque.pop_back();
        }
        self.deque.push_back((ts_ms, price));
        while self.deque.front().is_some_and(|&(t, _)| t <= ts_ms - self.window_ms) {
            self.deque.pop_front();
        }
        self.deque.front().expect("just pushed").1
    }
}

#[derive(Debug, Clone)]
pub struct ShockGuard {
    cfg: ShockConfig,
    window: RollingMax,
    last_ts: Option<i64>,
    cooldown_until: i64,
    /// Reference ATR in price units for the ATR threshold mode.
    pub atr_ref: f64,
}

impl ShockGuard {
    pub fn new(cfg: ShockConfig) -> Result<Self, ShockError> {
        cfg.validate()?;
        Ok(Self { window: RollingMax::new(cfg.window_ms), cfg, last_ts: None, cooldown_until: i64::MIN, atr_ref: 0.0 })
    }

    pub fn config(&self) -> &ShockConfig {
        &self.cfg
    }

    pub fn in_cooldown(&self, ts_ms: i64) -> bool {
        ts_ms < self.cooldown_until
    }

    pub fn observe_tick(&mut self, tick: &Tick) -> Result<Option<ShockEvent>, ShockError> {
        if let Some(prev_ms) = self.last_ts {
            if tick.ts_ms < prev_ms {
                return Err(ShockError::Ordering { prev_ms, ts_ms: tick.ts_ms });
            }
        }
        self.last_ts = Some(tick.ts_ms);
        let high = self.window.push(tick.ts_ms, tick.price);
        let drop = high - tick.price;
        let triggered = drop > 0.0
            && match self.cfg.threshold {
                ShockThreshold::DropFrac(f) => drop / high >= f,
                ShockThreshold::AtrMultiple(m) => self.atr_ref > 0.0 && drop >= m * self.atr_ref,
            };
        if !triggered || self.in_cooldown(tick.ts_ms) {
            return Ok(None);
        }
        self.cooldown_until = tick.ts_ms.saturating_add(self.cfg.cooldown_ms);
        Ok(Some(ShockEvent {
            detected_at: tick.ts_ms,
            window_high: high,
            trigger_price: tick.price,
            magnitude: 1.0 - tick.price / high,
            action_taken: self.cfg.action,
        }))
    }
}

/// Four pseudo-ticks per bar (open, high, low, close) one second apart from
/// the bar's open, for runs without recorded ticks.
pub fn pseudo_ticks(bar: &Bar) -> [Tick; 4] {
    let t = bar.ts * 1000;
    [
        Tick { ts_ms: t, price: bar.open, qty: 0.0 },
        Tick { ts_ms: t + 1000, price: bar.high, qty: 0.0 },
        Tick { ts_ms: t + 2000, price: bar.low, qty: 0.0 },
        Tick { ts_ms: t + 3000, price: bar.close, qty: 0.0 },
    ]
}

/// What the execution layer must do in response to a shock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverrideCommand {
    pub issued_at: i64,
    /// Quantity to sell at market; zero when flat already.
    pub close_qty: f64,
    pub set_bias_flat: bool,
    pub halt: bool,
}

pub fn emergency_action(event: &ShockEvent, open_qty: f64) -> OverrideCommand {
    OverrideCommand {
        issued_at: event.detected_at,
        close_qty: open_qty.max(0.0),
        set_bias_flat: true,
        halt: event.action_taken == ShockAction::Halt,
    }
}

const ACTIVE: u8 = 0;
const HALTED: u8 = 1;

/// Trading status shared by both tiers and the execution layer.
#[derive(Debug, Clone, Default)]
pub struct StatusFlag(Arc<AtomicU8>);

impl StatusFlag {
    pub fn is_halted(&self) -> bool {
        self.0.load(Ordering::Acquire) == HALTED
    }

    pub fn halt(&self) {
        self.0.store(HALTED, Ordering::Release);
    }

    pub fn resume(&self) {
        self.0.store(ACTIVE, Ordering::Release);
    }
}

/// Run the guard on its own thread. Each shock is sent on `overrides` and,
/// for the HALT action, the shared status is set before sending so any
/// reader that sees the event also sees the halt.
pub fn spawn_guard(
    cfg: ShockConfig,
    ticks: Receiver<Tick>,
    overrides: Sender<ShockEvent>,
    status: StatusFlag,
) -> Result<JoinHandle<Result<(), ShockError>>, ShockError> {
    let mut guard = ShockGuard::new(cfg)?;
    Ok(std::thread::spawn(move || {
        for tick in ticks {
            if let Some(ev) = guard.observe_tick(&tick)? {
                if ev.action_taken == ShockAction::Halt {
                    status.halt();
                }
                if overrides.send(ev).is_err() {
                    break;
                }
            }
        }
        Ok(())
    }))
}

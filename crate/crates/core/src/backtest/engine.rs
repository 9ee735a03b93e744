//! The bar-by-bar simulation loop.
//!
//! Per 15-minute bar `t` the engine:
//! 1. fills orders queued by the previous bar at this bar's open,
//! 2. applies time and liquidity stops at the open,
//! 3. applies protective stops against the bar's range,
//! 4. feeds the shock guard (recorded ticks, or four pseudo-ticks),
//! 5. on a decision epoch, runs the strategic tier and queues at most one order,
//! 6. distills reflections whose 7-day horizon has elapsed,
//! 7. marks to market at the close and updates the circuit breaker.
//!
//! Everything the engine logs carries a timestamp in seconds: fills at the
//! time they happen, and end-of-bar work (decisions, reflections, breaker
//! transitions) at the bar's close, `t + interval`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::config::RunConfig;
use super::metrics::{compute_metrics, Metrics};
use super::{decision_schedule, BacktestError, RunData};
use crate::execution::{mark_to_market, submit_order, ExecutionError, Fill, Order, OrderKind, OrderQueue, Origin, Portfolio, Side, QTY_EPS};
use crate::market_data::Tick;
use crate::memory::{Embedder, FeatureEmbedder, Horizon, ReplayBuffer};
use crate::model_gateway::{FallbackCounter, Policy};
use crate::reflection::{distill, horizon_returns, reflect, OutcomeLabel, PostTradeTuple, Reflection, ReflectionError};
use crate::regime::{thresholds_for, RegimeLabel, RegimeSnapshot, RegimeThresholds};
use crate::risk::{cost_gate, exposure_and_time_checks, kelly_size, stop_distance, CircuitBreaker, CostGate, ExposureDecision, HaltReason, OpenPosition, TradingStatus};
use crate::shock_guard::{emergency_action, pseudo_ticks, ShockEvent, ShockGuard, StatusFlag};
use crate::strategist::{decide, gate_execution, hysteresis_update, refresh_due, Bias, BiasState, DecisionTuple, MarketContext, BIAS_REFRESH_SECS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FillReason {
    Entry,
    Exit,
    Stop,
    TimeStop,
    Liquidity,
    Shock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HaltSource {
    DailyLoss,
    Drawdown,
    Shock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Buy,
    Sell,
    Hold,
    /// LONG bias but the execution gate did not pass.
    Abstain,
    Halted,
    NoStop,
    SizeZero,
    CostReject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Fill { fill: Fill, reason: FillReason },
    OrderRejected { order_id: u64, side: Side, origin: Origin, reason: String },
    OrderCancelled { order_id: u64, side: Side, reason: String },
    CostGateReject { decision_id: String, notional: f64, gate: CostGate },
    Shock { event: ShockEvent },
    Halt { source: HaltSource, value: f64 },
    Resume,
    Fallback { stage: String, detail: String },
    SkipEpoch { t: i64, reason: String },
    Reflection { entry_t: i64, experience_id: String, outcome: OutcomeLabel },
    ReflectionSkipped { entry_t: i64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts: i64,
    #[serde(flatten)]
    pub event: Event,
}

/// Everything the strategic tier saw and did at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub t: i64,
    pub decision_id: String,
    pub snapshot_digest: String,
    pub regime: RegimeSnapshot,
    pub thresholds: RegimeThresholds,
    pub retrieved: Vec<String>,
    pub tuple: DecisionTuple,
    pub bias_before: Bias,
    pub bias_after: Bias,
    pub refreshed: bool,
    pub gate: bool,
    pub halted: bool,
    pub action: Action,
    /// Fraction of equity from the sizing rule, before the exposure cap.
    pub size_frac: f64,
    pub qty: f64,
    pub cost_gate: Option<CostGate>,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub t: i64,
    pub tuple: PostTradeTuple,
    pub reflection: Reflection,
    pub experience_id: String,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub name: String,
    pub provider: String,
    pub model: String,
    pub memory: bool,
    pub epochs: Vec<i64>,
    /// Equity at each bar close.
    pub curve: Vec<(i64, f64)>,
    pub fills: Vec<Fill>,
    pub events: Vec<EventRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub reflections: Vec<ReflectionRecord>,
    /// Absent when memory is disabled.
    pub buffer: Option<ReplayBuffer>,
    pub fallbacks: FallbackCounter,
    pub metrics: Metrics,
    /// Bars simulated.
    pub bars: usize,
}

/// What an entry needs to be reflected on later.
#[derive(Debug, Clone)]
struct EntryContext {
    digest: String,
    tuple: DecisionTuple,
    embed: Vec<f64>,
    regime: RegimeLabel,
}

#[derive(Debug, Clone)]
struct ReflectionJob {
    entry_t: i64,
    entry_price: f64,
    due: i64,
    ctx: EntryContext,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    ctx: MarketContext,
    policy: &'a mut dyn Policy,
    interval: i64,
    portfolio: Portfolio,
    queue: OrderQueue,
    pending: BTreeMap<u64, (FillReason, Option<EntryContext>)>,
    next_order: u64,
    status: StatusFlag,
    breaker: CircuitBreaker,
    breaker_status: TradingStatus,
    shock_until_ms: i64,
    guard: ShockGuard,
    bias: BiasState,
    buffer: Option<ReplayBuffer>,
    jobs: VecDeque<ReflectionJob>,
    open_entry: Option<i64>,
    exits: BTreeMap<i64, (f64, i64)>,
    fallbacks: FallbackCounter,
    fills: Vec<Fill>,
    events: Vec<EventRecord>,
    decisions: Vec<DecisionRecord>,
    reflections: Vec<ReflectionRecord>,
}

/// Run one configuration over `data` with `policy`.
pub fn run_backtest(cfg: &RunConfig, data: &RunData, policy: &mut dyn Policy) -> Result<RunOutput, BacktestError> {
    cfg.validate()?;
    let interval = cfg.run.interval_secs;
    if data.m15.interval != interval {
        return Err(BacktestError::Config(format!(
            "series interval {} does not match run interval {interval}",
            data.m15.interval
        )));
    }
    let ctx = MarketContext::new(data.m15.clone(), data.h1.clone(), data.evidence.clone(), cfg.snapshot)
        .map_err(|e| BacktestError::Runtime { ts: cfg.run.start.0, msg: e.to_string() })?;
    let bars = &data.m15.bars;
    let lo = bars.partition_point(|b| b.ts < cfg.run.start.0);
    let hi = bars.partition_point(|b| b.ts < cfg.run.end.0);
    if lo >= hi {
        return Err(BacktestError::Config("no bars inside the run range".into()));
    }
    let first = (lo..hi).find(|&i| ctx.is_ready(i)).ok_or_else(|| {
        BacktestError::WarmUp(format!(
            "{} bars of history are needed before the first decision",
            ctx.regime_history()
        ))
    })?;
    let epochs = decision_schedule(bars[first].ts, cfg.run.end.0, interval, &cfg.schedule)?;
    if hi - lo < cfg.range_bars() {
        warn!(loaded = hi - lo, expected = cfg.range_bars(), "data ends before the configured range");
    }
    let buffer = if cfg.run.memory {
        Some(
            ReplayBuffer::new(cfg.memory.half_life_secs(), cfg.memory.capacity)
                .map_err(|e| BacktestError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let guard = ShockGuard::new(cfg.shock).map_err(|e| BacktestError::Config(e.to_string()))?;

    let mut engine = Engine {
        cfg,
        ctx,
        policy,
        interval,
        portfolio: Portfolio::new(cfg.run.initial_equity),
        queue: OrderQueue::default(),
        pending: BTreeMap::new(),
        next_order: 1,
        status: StatusFlag::default(),
        breaker: CircuitBreaker::default(),
        breaker_status: TradingStatus::Active,
        shock_until_ms: i64::MIN,
        guard,
        bias: BiasState::default(),
        buffer,
        jobs: VecDeque::new(),
        open_entry: None,
        exits: BTreeMap::new(),
        fallbacks: FallbackCounter::default(),
        fills: Vec::new(),
        events: Vec::new(),
        decisions: Vec::new(),
        reflections: Vec::new(),
    };

    let ticks = data.ticks.as_deref().unwrap_or(&[]);
    let mut tick_at = ticks.partition_point(|k| k.ts_ms < bars[lo].ts * 1000);
    let mut next_epoch = 0;
    for i in lo..hi {
        let t = bars[i].ts;
        let bar_ticks: Vec<Tick> = if data.ticks.is_some() {
            let start = tick_at;
            while tick_at < ticks.len() && ticks[tick_at].ts_ms < (t + interval) * 1000 {
                tick_at += 1;
            }
            ticks[start..tick_at].iter().filter(|k| k.ts_ms >= t * 1000).copied().collect()
        } else {
            pseudo_ticks(&bars[i]).to_vec()
        };
        let epoch = loop {
            match epochs.get(next_epoch) {
                Some(&e) if e < t => {
                    engine.log(e + interval, Event::SkipEpoch { t: e, reason: "no bar at this timestamp".into() });
                    next_epoch += 1;
                }
                Some(&e) if e == t => {
                    next_epoch += 1;
                    break true;
                }
                _ => break false,
            }
        };
        engine.step(i, epoch, &bar_ticks)?;
    }
    engine.flush_reflections(bars[hi - 1].ts + interval)?;

    let Engine { portfolio, fills, events, decisions, reflections, buffer, fallbacks, .. } = engine;
    let curve = portfolio.history;
    let metrics = compute_metrics(&curve, &fills, &epochs, fallbacks.count);
    info!(
        trades = metrics.trades,
        total_return = metrics.total_return,
        fallbacks = fallbacks.count,
        "run {} finished",
        cfg.run_name()
    );
    Ok(RunOutput {
        name: cfg.run_name(),
        provider: cfg.run.provider.clone(),
        model: cfg.run.model.clone(),
        memory: cfg.run.memory,
        epochs,
        curve,
        fills,
        events,
        decisions,
        reflections,
        buffer,
        fallbacks,
        metrics,
        bars: hi - lo,
    })
}

impl Engine<'_> {
    fn log(&mut self, ts: i64, event: Event) {
        debug!(ts, ?event, "event");
        self.events.push(EventRecord { ts, event });
    }

    fn halted(&self, now_ms: i64) -> bool {
        self.breaker_status.is_halted() || now_ms < self.shock_until_ms
    }

    /// Bring the shared flag in line with the breaker and shock state,
    /// logging transitions.
    fn sync_status(&mut self, ts: i64, now_ms: i64) {
        let halted = self.halted(now_ms);
        if halted == self.status.is_halted() {
            return;
        }
        if halted {
            self.status.halt();
            let (source, value) = match self.breaker_status {
                TradingStatus::Halted(HaltReason::DailyLoss { change }) => (HaltSource::DailyLoss, change),
                TradingStatus::Halted(HaltReason::Drawdown { drawdown }) => (HaltSource::Drawdown, drawdown),
                TradingStatus::Active => (HaltSource::Shock, (self.shock_until_ms - now_ms) as f64 / 1000.0),
            };
            self.log(ts, Event::Halt { source, value });
            for o in self.queue.cancel_strategic() {
                self.pending.remove(&o.id);
                self.log(ts, Event::OrderCancelled { order_id: o.id, side: o.side, reason: "halted".into() });
            }
        } else {
            self.status.resume();
            self.log(ts, Event::Resume);
        }
    }

    fn new_order(&mut self, side: Side, qty: f64, origin: Origin, ts: i64, decision_id: Option<String>, stop: Option<f64>) -> Order {
        let id = self.next_order;
        self.next_order += 1;
        Order { id, side, qty, kind: OrderKind::Market, origin, submitted_at: ts, decision_id, stop_price: stop }
    }

    /// Execute `o` at `mark` now and record the outcome.
    fn execute(&mut self, o: &Order, mark: f64, ts: i64, reason: FillReason, entry: Option<EntryContext>) -> Result<(), BacktestError> {
        let halted = self.status.is_halted();
        match submit_order(&mut self.portfolio, o, mark, &self.cfg.costs, self.cfg.execution.slippage_bps, halted, ts) {
            Ok(fill) => {
                match fill.side {
                    Side::Buy => {
                        self.open_entry.get_or_insert(ts);
                        if let (Some(ctx), true) = (entry, self.buffer.is_some()) {
                            self.jobs.push_back(ReflectionJob {
                                entry_t: ts,
                                entry_price: fill.price,
                                due: ts + Horizon::D7.secs(),
                                ctx,
                            });
                        }
                    }
                    Side::Sell => {
                        if self.portfolio.is_flat() {
                            if let Some(entry_t) = self.open_entry.take() {
                                self.exits.insert(entry_t, (fill.price, ts));
                            }
                        }
                    }
                }
                self.fills.push(fill.clone());
                self.log(ts, Event::Fill { fill, reason });
                Ok(())
            }
            Err(e @ (ExecutionError::Halted(_) | ExecutionError::InsufficientFunds { .. } | ExecutionError::InsufficientPosition { .. })) => {
                self.log(ts, Event::OrderRejected { order_id: o.id, side: o.side, origin: o.origin, reason: e.to_string() });
                Ok(())
            }
            Err(e) => Err(BacktestError::Runtime { ts, msg: e.to_string() }),
        }
    }

    /// Sell everything at `price` as an emergency order.
    fn close_all(&mut self, price: f64, ts: i64, reason: FillReason) -> Result<(), BacktestError> {
        let qty = self.portfolio.qty();
        if qty <= QTY_EPS {
            return Ok(());
        }
        let o = self.new_order(Side::Sell, qty, Origin::Emergency, ts, None, None);
        self.execute(&o, price, ts, reason, None)?;
        self.bias.current = Bias::Flat;
        Ok(())
    }

    fn step(&mut self, i: usize, epoch: bool, ticks: &[Tick]) -> Result<(), BacktestError> {
        let bar = self.ctx.m15.bars[i];
        let t = bar.ts;
        let close_ts = t + self.interval;
        self.sync_status(t, t * 1000);

        // 1. queued orders at the open
        while let Some(o) = self.queue.pop() {
            let (reason, entry) = self.pending.remove(&o.id).unwrap_or((FillReason::Exit, None));
            self.execute(&o, bar.open, t, reason, entry)?;
        }

        // 2. time and liquidity stops
        if !self.portfolio.is_flat() {
            let hour = (3600 / self.interval).max(1) as usize;
            let recent_volume: f64 = self.ctx.m15.bars[i.saturating_sub(hour)..i].iter().map(|b| b.volume).sum();
            let open: Vec<OpenPosition> = self
                .portfolio
                .positions
                .iter()
                .map(|p| OpenPosition { id: p.id, qty: p.qty, entry_t: p.entry_t })
                .collect();
            let equity = self.portfolio.equity(bar.open);
            if let ExposureDecision::ForceClose(ids) =
                exposure_and_time_checks(&open, 0.0, bar.open, equity, &self.cfg.risk, t, recent_volume)
            {
                let reason = if recent_volume < self.cfg.risk.liquidity_floor { FillReason::Liquidity } else { FillReason::TimeStop };
                let qty: f64 = open.iter().filter(|p| ids.contains(&p.id)).map(|p| p.qty).sum();
                let o = self.new_order(Side::Sell, qty, Origin::Emergency, t, None, None);
                self.execute(&o, bar.open, t, reason, None)?;
                if self.portfolio.is_flat() {
                    self.bias.current = Bias::Flat;
                }
            }
        }

        // 3. protective stops
        let stopped: Vec<(f64, f64)> = self
            .portfolio
            .positions
            .iter()
            .filter_map(|p| p.stop_price.filter(|&s| bar.low <= s).map(|s| (p.qty, s.min(bar.open))))
            .collect();
        for (qty, price) in stopped {
            let o = self.new_order(Side::Sell, qty.min(self.portfolio.qty()), Origin::Emergency, t, None, None);
            self.execute(&o, price, t, FillReason::Stop, None)?;
            self.bias.current = Bias::Flat;
        }

        // 4. shock guard
        if i > 0 {
            if let Ok(prev) = self.ctx.table.get(i - 1) {
                self.guard.atr_ref = prev.atr14;
            }
        }
        for tick in ticks {
            let shock = self.guard.observe_tick(tick).map_err(|e| BacktestError::Runtime { ts: t, msg: e.to_string() })?;
            let Some(ev) = shock else { continue };
            let ts = ev.detected_at.div_euclid(1000);
            warn!(ts, magnitude = ev.magnitude, "shock detected");
            self.log(ts, Event::Shock { event: ev });
            let cmd = emergency_action(&ev, self.portfolio.qty());
            if cmd.close_qty > QTY_EPS {
                self.close_all(ev.trigger_price, ts, FillReason::Shock)?;
            }
            if cmd.set_bias_flat {
                self.bias.current = Bias::Flat;
            }
            for o in self.queue.cancel_strategic() {
                self.pending.remove(&o.id);
                self.log(ts, Event::OrderCancelled { order_id: o.id, side: o.side, reason: "shock".into() });
            }
            if cmd.halt {
                self.shock_until_ms = ev.detected_at + self.guard.config().cooldown_ms;
                self.sync_status(ts, ev.detected_at);
            }
        }

        // 5. strategic tier
        if epoch {
            self.strategic(t, close_ts)?;
        }

        // 6. reflections
        while self.jobs.front().is_some_and(|j| j.due <= t) {
            let job = self.jobs.pop_front().expect("front checked");
            self.reflect_on(job, t, close_ts)?;
        }

        // 7. mark to market and circuit breaker
        let equity = mark_to_market(&mut self.portfolio, bar.close, close_ts)
            .map_err(|e| BacktestError::Runtime { ts: close_ts, msg: e.to_string() })?;
        self.breaker_status = self.breaker.observe(close_ts, equity, &self.cfg.risk);
        self.sync_status(close_ts, close_ts * 1000);
        Ok(())
    }

    fn strategic(&mut self, t: i64, close_ts: i64) -> Result<(), BacktestError> {
        let snap = match self.ctx.build_snapshot(t) {
            Ok(s) => s,
            Err(skip) => {
                self.log(close_ts, Event::SkipEpoch { t, reason: skip.reason });
                return Ok(());
            }
        };
        let th = thresholds_for(&snap.regime, &self.cfg.regime);
        let digest = snap.digest();
        let decision_id = format!("d{t}");
        let embed = self.buffer.as_ref().map(|_| FeatureEmbedder.embed(&snap));
        let retrieved = match (&self.buffer, &embed) {
            (Some(b), Some(q)) => b.retrieve_top_k(q, snap.regime.label, self.cfg.memory.k, self.cfg.memory.alpha, t),
            _ => Vec::new(),
        };
        let retrieved_ids: Vec<String> = retrieved.iter().map(|e| e.id.clone()).collect();
        let (tuple, fallback) = decide(&snap, &retrieved, &mut *self.policy, &mut self.fallbacks);
        if let Some(detail) = &fallback {
            self.log(close_ts, Event::Fallback { stage: "decision".into(), detail: detail.clone() });
        }

        let bias_before = self.bias.current;
        let refreshed = refresh_due(&self.bias, t, BIAS_REFRESH_SECS);
        if refreshed {
            self.bias = hysteresis_update(self.bias, &tuple, &th, t);
        }
        let gate = gate_execution(&tuple, &th);
        let halted = self.status.is_halted();
        let mut record = DecisionRecord {
            t,
            decision_id: decision_id.clone(),
            snapshot_digest: digest.clone(),
            regime: snap.regime,
            thresholds: th,
            retrieved: retrieved_ids,
            tuple: tuple.clone(),
            bias_before,
            bias_after: self.bias.current,
            refreshed,
            gate,
            halted,
            action: Action::Hold,
            size_frac: 0.0,
            qty: 0.0,
            cost_gate: None,
            fallback,
        };

        let flat = self.portfolio.is_flat();
        match self.bias.current {
            Bias::Long if flat && halted => record.action = Action::Halted,
            Bias::Long if flat && !gate => record.action = Action::Abstain,
            Bias::Long if flat => {
                let close = snap.close();
                let stop_dist = stop_distance(snap.ind.atr14, &th);
                if !(stop_dist > 0.0) {
                    record.action = Action::NoStop;
                } else {
                    let stop_bps = 10_000.0 * stop_dist / close;
                    let frac = kelly_size(tuple.confidence, tuple.expected_move_bps, stop_bps, &self.cfg.risk, th.size_scalar)
                        .map_err(|e| BacktestError::Runtime { ts: close_ts, msg: e.to_string() })?;
                    let equity = self.portfolio.equity(close);
                    let mut qty = frac * equity / close;
                    let open: Vec<OpenPosition> = self
                        .portfolio
                        .positions
                        .iter()
                        .map(|p| OpenPosition { id: p.id, qty: p.qty, entry_t: p.entry_t })
                        .collect();
                    if let ExposureDecision::Shrink { qty: q, .. } =
                        exposure_and_time_checks(&open, qty, close, equity, &self.cfg.risk, t, f64::INFINITY)
                    {
                        qty = q;
                    }
                    record.size_frac = frac;
                    record.qty = qty;
                    if qty <= QTY_EPS {
                        record.action = Action::SizeZero;
                    } else {
                        let gate = cost_gate(tuple.expected_move_bps, qty * close, &self.cfg.costs);
                        record.cost_gate = Some(gate);
                        if gate.pass {
                            record.action = Action::Buy;
                            let o = self.new_order(Side::Buy, qty, Origin::Strategic, close_ts, Some(decision_id.clone()), Some(close - stop_dist));
                            let ctx = EntryContext {
                                digest,
                                tuple: tuple.clone(),
                                embed: embed.unwrap_or_default(),
                                regime: snap.regime.label,
                            };
                            self.pending.insert(o.id, (FillReason::Entry, Some(ctx)));
                            self.queue.push(o);
                        } else {
                            record.action = Action::CostReject;
                            self.log(close_ts, Event::CostGateReject { decision_id: decision_id.clone(), notional: qty * close, gate });
                        }
                    }
                }
            }
            Bias::Flat if !flat && halted => record.action = Action::Halted,
            Bias::Flat if !flat => {
                record.action = Action::Sell;
                let qty = self.portfolio.qty();
                record.qty = qty;
                let o = self.new_order(Side::Sell, qty, Origin::Strategic, close_ts, Some(decision_id.clone()), None);
                self.pending.insert(o.id, (FillReason::Exit, None));
                self.queue.push(o);
            }
            _ => {}
        }
        debug!(t, action = ?record.action, bias = ?record.bias_after, "decision");
        self.decisions.push(record);
        Ok(())
    }

    fn reflect_on(&mut self, job: ReflectionJob, t: i64, ts: i64) -> Result<(), BacktestError> {
        let round_trip_bps = 2.0 * (self.cfg.costs.lp_fee_bps + self.cfg.execution.slippage_bps);
        let returns = match horizon_returns(job.entry_price, job.entry_t, &self.ctx.m15, round_trip_bps) {
            Ok(r) => r.into_iter().filter(|(h, _)| job.entry_t + h.secs() <= t).collect(),
            Err(e @ (ReflectionError::Unreachable(_) | ReflectionError::UnknownEntry(_))) => {
                self.log(ts, Event::ReflectionSkipped { entry_t: job.entry_t, reason: e.to_string() });
                return Ok(());
            }
        };
        let (exit_price, exit_t) = match self.exits.get(&job.entry_t) {
            Some(&(p, x)) => (Some(p), Some(x)),
            None => (None, None),
        };
        let tau = PostTradeTuple {
            snapshot_digest: job.ctx.digest,
            decision: job.ctx.tuple,
            entry_price: job.entry_price,
            entry_t: job.entry_t,
            exit_price,
            exit_t,
            cost_bps: round_trip_bps,
            horizon_returns: returns,
        };
        if tau.horizon_returns.is_empty() {
            self.log(ts, Event::ReflectionSkipped { entry_t: job.entry_t, reason: "no horizon has elapsed".into() });
            return Ok(());
        }
        let (f, fallback) = reflect(&tau, &mut *self.policy, self.cfg.reflection.band_bps, &mut self.fallbacks);
        if let Some(detail) = &fallback {
            self.log(ts, Event::Fallback { stage: "reflection".into(), detail: detail.clone() });
        }
        let exp = distill(&tau, &f, job.ctx.embed, job.ctx.regime, t);
        let id = exp.id.clone();
        if let Some(buffer) = self.buffer.as_mut() {
            buffer.insert(exp).map_err(|e| BacktestError::Runtime { ts, msg: e.to_string() })?;
        }
        self.log(ts, Event::Reflection { entry_t: job.entry_t, experience_id: id.clone(), outcome: f.outcome_label });
        self.reflections.push(ReflectionRecord { t, tuple: tau, reflection: f, experience_id: id, fallback });
        Ok(())
    }

    /// Reflect on entries whose horizons did not all elapse before the data
    /// ended, using whichever horizons are available.
    fn flush_reflections(&mut self, ts: i64) -> Result<(), BacktestError> {
        let last = ts - self.interval;
        while let Some(job) = self.jobs.pop_front() {
            self.reflect_on(job, last, ts)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::{ScheduleSpec, Timestamp};
    use crate::model_gateway::{AbstainPolicy, StubPolicy};
    use crate::synth::{generate, SynthConfig};

    fn setup(bars: usize, memory: bool) -> (RunConfig, RunData) {
        let synth = SynthConfig { bars, ..SynthConfig::default() };
        let d = generate(&synth);
        let mut cfg = RunConfig::from_toml(&format!(
            "[run]\nsymbol = \"BTCUSDT\"\nstart = \"{}\"\nend = \"{}\"\nmemory = {memory}\n[data]\nm15 = \"unused.csv\"\n",
            Timestamp(synth.start).to_rfc3339(),
            Timestamp(synth.start + bars as i64 * 900).to_rfc3339()
        ))
        .unwrap();
        cfg.schedule = ScheduleSpec::FixedCount { n: (bars / 287).max(1) };
        (cfg, RunData::from_parts(d.series, None, d.evidence, None).unwrap())
    }

    #[test]
    fn abstain_never_trades() {
        let (cfg, data) = setup(4_000, true);
        let out = run_backtest(&cfg, &data, &mut AbstainPolicy).unwrap();
        assert!(out.fills.is_empty());
        assert_eq!(out.metrics.equity_end, 10_000.0);
        assert_eq!(out.decisions.len(), out.epochs.len());
    }

    #[test]
    fn stub_run_is_deterministic() {
        let (cfg, data) = setup(6_000, true);
        let a = run_backtest(&cfg, &data, &mut StubPolicy::default()).unwrap();
        let b = run_backtest(&cfg, &data, &mut StubPolicy::default()).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.curve, b.curve);
        let m = a.metrics;
        assert!((m.equity_end / (10_000.0 * (1.0 + m.total_return)) - 1.0).abs() < 1e-9);
    }
}

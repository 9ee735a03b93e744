//! Simulated exchange: market-order fills with fees and slippage, long-only
//! portfolio accounting and mark-to-market.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::risk::CostModel;
use crate::shock_guard::StatusFlag;

/// Quantities below this are treated as zero.
pub const QTY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecutionError {
    #[error("insufficient cash: need {need}, have {have}")]
    InsufficientFunds { need: f64, have: f64 },
    #[error("insufficient position: sell {want}, hold {have}")]
    InsufficientPosition { want: f64, have: f64 },
    #[error("trading halted; strategic order {0} rejected")]
    Halted(u64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Buy,
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Strategic,
    Emergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderKind {
    Market,
}

macro_rules! upper_display {
    ($($t:ty => { $($v:ident = $s:literal),* }),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
    )*};
}

upper_display!(Side => { Buy = "BUY", Sell = "SELL" }, Origin => { Strategic = "STRATEGIC", Emergency = "EMERGENCY" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: u64,
    pub side: Side,
    pub qty: f64,
    pub kind: OrderKind,
    pub origin: Origin,
    pub submitted_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
    /// Protective stop for the position a buy opens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_price: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub fill_ts: i64,
    pub side: Side,
    pub qty: f64,
    pub price: f64,
    pub fee: f64,
    pub origin: Origin,
    pub decision_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub id: u64,
    pub entry_price: f64,
    pub entry_t: i64,
    pub qty: f64,
    pub stop_price: Option<f64>,
    pub decision_id: String,
    /// Cash spent including the entry fee.
    pub cost_basis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub cash: f64,
    pub positions: Vec<Position>,
    pub history: Vec<(i64, f64)>,
    next_position_id: u64,
}

impl Portfolio {
    pub fn new(cash: f64) -> Self {
        Self { cash, positions: Vec::new(), history: Vec::new(), next_position_id: 1 }
    }

    pub fn qty(&self) -> f64 {
        self.positions.iter().map(|p| p.qty).sum()
    }

    pub fn is_flat(&self) -> bool {
        self.qty() <= QTY_EPS
    }

    pub fn equity(&self, mark: f64) -> f64 {
        self.cash + self.qty() * mark
    }
}

pub fn fill_price(side: Side, mark: f64, slippage_bps: f64) -> f64 {
    match side {
        Side::Buy => mark * (1.0 + slippage_bps / 10_000.0),
        Side::Sell => mark * (1.0 - slippage_bps / 10_000.0),
    }
}

/// Execute a market order against `mark`. Sells close positions oldest
/// first. Emergency orders execute even while halted.
pub fn submit_order(
    p: &mut Portfolio,
    o: &Order,
    mark: f64,
    fees: &CostModel,
    slippage_bps: f64,
    halted: bool,
    ts: i64,
) -> Result<Fill, ExecutionError> {
    if !(o.qty > 0.0) || !o.qty.is_finite() {
        return Err(ExecutionError::Argument(format!("order quantity {} must be positive", o.qty)));
    }
    if !(mark > 0.0) {
        return Err(ExecutionError::Argument(format!("mark {mark} must be positive")));
    }
    if halted && o.origin == Origin::Strategic {
        return Err(ExecutionError::Halted(o.id));
    }
    let price = fill_price(o.side, mark, slippage_bps);
    let notional = o.qty * price;
    let fee = notional * fees.lp_fee_bps / 10_000.0;
    match o.side {
        Side::Buy => {
            let need = notional + fee;
            if need > p.cash {
                return Err(ExecutionError::InsufficientFunds { need, have: p.cash });
            }
            p.cash -= need;
            let id = p.next_position_id;
            p.next_position_id += 1;
            p.positions.push(Position {
                id,
                entry_price: price,
                entry_t: ts,
                qty: o.qty,
                stop_price: o.stop_price,
                decision_id: o.decision_id.clone().unwrap_or_default(),
                cost_basis: need,
            });
        }
        Side::Sell => {
            let have = p.qty();
            if o.qty > have * (1.0 + 1e-9) + QTY_EPS {
                return Err(ExecutionError::InsufficientPosition { want: o.qty, have });
            }
            let mut left = o.qty;
            for pos in p.positions.iter_mut() {
                let take = left.min(pos.qty);
                pos.cost_basis *= (pos.qty - take) / pos.qty;
                pos.qty -= take;
                left -= take;
                if left <= QTY_EPS {
                    break;
                }
            }
            p.positions.retain(|pos| pos.qty > QTY_EPS);
            p.cash += notional - fee;
        }
    }
    Ok(Fill {
        fill_ts: ts,
        side: o.side,
        qty: o.qty,
        price,
        fee,
        origin: o.origin,
        decision_id: o.decision_id.clone().unwrap_or_default(),
    })
}

/// Append the equity at `mark` to the history.
pub fn mark_to_market(p: &mut Portfolio, mark: f64, t: i64) -> Result<f64, ExecutionError> {
    if !(mark > 0.0) {
        return Err(ExecutionError::Argument(format!("mark {mark} must be positive")));
    }
    if let Some(&(last, _)) = p.history.last() {
        if t <= last {
            return Err(ExecutionError::Argument(format!("mark at {t} is not after {last}")));
        }
    }
    let e = p.equity(mark);
    p.history.push((t, e));
    Ok(e)
}

/// Pending orders; emergency orders are served before strategic ones.
#[derive(Debug, Clone, Default)]
pub struct OrderQueue {
    emergency: VecDeque<Order>,
    strategic: VecDeque<Order>,
}

impl OrderQueue {
    pub fn push(&mut self, o: Order) {
        match o.origin {
            Origin::Emergency => self.emergency.push_back(o),
            Origin::Strategic => self.strategic.push_back(o),
        }
    }

    pub fn pop(&mut self) -> Option<Order> {
        self.emergency.pop_front().or_else(|| self.strategic.pop_front())
    }

    pub fn cancel(&mut self, id: u64) -> bool {
        let before = self.len();
        self.emergency.retain(|o| o.id != id);
        self.strategic.retain(|o| o.id != id);
        self.len() < before
    }

    /// Drop every pending strategic order, returning them.
    pub fn cancel_strategic(&mut self) -> Vec<Order> {
        self.strategic.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.emergency.len() + self.strategic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Venue interface for dispatching orders. The simulator implements it;
/// live exchange adapters would implement the same calls.
pub trait ExecutionAdapter {
    /// Queue an order for the next [`ExecutionAdapter::execute_pending`].
    fn submit(&mut self, order: Order);
    fn cancel(&mut self, order_id: u64) -> bool;
    /// Execute queued orders at `mark`, emergency orders first.
    fn execute_pending(&mut self, mark: f64, ts: i64) -> Vec<Result<Fill, ExecutionError>>;
    fn positions(&self) -> &[Position];
    fn balance(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct SimulatedExchange {
    pub portfolio: Portfolio,
    pub costs: CostModel,
    pub slippage_bps: f64,
    pub status: StatusFlag,
    queue: OrderQueue,
}

impl SimulatedExchange {
    pub fn new(cash: f64, costs: CostModel, slippage_bps: f64, status: StatusFlag) -> Self {
        Self { portfolio: Portfolio::new(cash), costs, slippage_bps, status, queue: OrderQueue::default() }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn cancel_strategic(&mut self) -> Vec<Order> {
        self.queue.cancel_strategic()
    }
}

impl ExecutionAdapter for SimulatedExchange {
    fn submit(&mut self, order: Order) {
        self.queue.push(order);
    }

    fn cancel(&mut self, order_id: u64) -> bool {
        self.queue.cancel(order_id)
    }

    fn execute_pending(&mut self, mark: f64, ts: i64) -> Vec<Result<Fill, ExecutionError>> {
        let mut out = Vec::new();
        while let Some(o) = self.queue.pop() {
            let halted = self.status.is_halted();
            out.push(submit_order(&mut self.portfolio, &o, mark, &self.costs, self.slippage_bps, halted, ts));
        }
        out
    }

    fn positions(&self) -> &[Position] {
        &self.portfolio.positions
    }

    fn balance(&self) -> f64 {
        self.portfolio.cash
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fees(bps: f64) -> CostModel {
        CostModel { lp_fee_bps: bps, ..CostModel::default() }
    }

    fn order(id: u64, side: Side, qty: f64, origin: Origin) -> Order {
        Order { id, side, qty, kind: OrderKind::Market, origin, submitted_at: 0, decision_id: None, stop_price: None }
    }

    #[test]
    fn buy_charges_fee() {
        let mut p = Portfolio::new(1_000.0);
        submit_order(&mut p, &order(1, Side::Buy, 1.0, Origin::Strategic), 100.0, &fees(10.0), 0.0, false, 0).unwrap();
        assert!((p.cash - (1_000.0 - 100.10)).abs() < 1e-9);
    }

    #[test]
    fn round_trip_costs_twenty_bps() {
        let mut p = Portfolio::new(1_000.0);
        submit_order(&mut p, &order(1, Side::Buy, 1.0, Origin::Strategic), 100.0, &fees(10.0), 0.0, false, 0).unwrap();
        submit_order(&mut p, &order(2, Side::Sell, 1.0, Origin::Strategic), 100.0, &fees(10.0), 0.0, false, 1).unwrap();
        let lost_bps = (1_000.0 - p.cash) / 100.0 * 10_000.0;
        assert!((lost_bps - 20.0).abs() < 1e-6, "{lost_bps}");
        assert!(p.is_flat());
    }

    #[test]
    fn halted_rejects_strategic_only() {
        let mut p = Portfolio::new(1_000.0);
        submit_order(&mut p, &order(1, Side::Buy, 1.0, Origin::Strategic), 100.0, &fees(10.0), 0.0, false, 0).unwrap();
        assert_eq!(
            submit_order(&mut p, &order(2, Side::Sell, 1.0, Origin::Strategic), 100.0, &fees(10.0), 0.0, true, 1),
            Err(ExecutionError::Halted(2))
        );
        submit_order(&mut p, &order(3, Side::Sell, 1.0, Origin::Emergency), 100.0, &fees(10.0), 0.0, true, 1).unwrap();
        assert!(p.is_flat());
    }

    #[test]
    fn rejects_overspend_and_oversell() {
        let mut p = Portfolio::new(50.0);
        assert!(matches!(
            submit_order(&mut p, &order(1, Side::Buy, 1.0, Origin::Strategic), 100.0, &fees(0.0), 0.0, false, 0),
            Err(ExecutionError::InsufficientFunds { .. })
        ));
        assert!(matches!(
            submit_order(&mut p, &order(2, Side::Sell, 1.0, Origin::Strategic), 100.0, &fees(0.0), 0.0, false, 0),
            Err(ExecutionError::InsufficientPosition { .. })
        ));
        assert_eq!(p.cash, 50.0);
    }

    #[test]
    fn marks() {
        let mut p = Portfolio::new(10_000.0);
        assert_eq!(mark_to_market(&mut p, 123.0, 0).unwrap(), 10_000.0);
        let mut q = Portfolio::new(0.0);
        q.positions.push(Position { id: 1, entry_price: 90.0, entry_t: 0, qty: 100.0, stop_price: None, decision_id: String::new(), cost_basis: 9_000.0 });
        assert_eq!(mark_to_market(&mut q, 95.0, 0).unwrap(), 9_500.0);
        assert!(mark_to_market(&mut q, 0.0, 1).is_err());
        assert!(mark_to_market(&mut q, 95.0, 0).is_err());
    }

    #[test]
    fn zero_cost_round_trip_restores_equity() {
        let mut p = Portfolio::new(10_000.0);
        submit_order(&mut p, &order(1, Side::Buy, 3.7, Origin::Strategic), 123.45, &fees(0.0), 0.0, false, 0).unwrap();
        submit_order(&mut p, &order(2, Side::Sell, 3.7, Origin::Strategic), 123.45, &fees(0.0), 0.0, false, 1).unwrap();
        assert_eq!(p.cash, 10_000.0);
    }

    #[test]
    fn emergency_jumps_queue() {
        let mut ex = SimulatedExchange::new(10_000.0, fees(0.0), 0.0, StatusFlag::default());
        ex.submit(order(1, Side::Buy, 1.0, Origin::Strategic));
        ex.submit(order(2, Side::Sell, 1.0, Origin::Emergency));
        let fills = ex.execute_pending(100.0, 0);
        // the emergency sell runs first and fails: nothing to sell yet
        assert!(matches!(fills[0], Err(ExecutionError::InsufficientPosition { .. })));
        assert!(fills[1].is_ok());
        assert!(ex.cancel(99) == false);
    }

    proptest! {
        #[test]
        fn double_entry_and_equity_replay(ops in prop::collection::vec((any::<bool>(), 0.01f64..5.0, 50.0f64..150.0), 1..80), fee in 0.0f64..30.0, slip in 0.0f64..20.0) {
            let mut p = Portfolio::new(10_000.0);
            let (mut cash, mut inv) = (10_000.0f64, 0.0f64);
            for (i, (buy, qty, mark)) in ops.into_iter().enumerate() {
                let side = if buy { Side::Buy } else { Side::Sell };
                let qty = if buy { qty } else { qty.min(p.qty()) };
                if qty <= 0.0 { continue; }
                let before = p.cash;
                let q_before = p.qty();
                if let Ok(f) = submit_order(&mut p, &order(i as u64, side, qty, Origin::Strategic), mark, &fees(fee), slip, false, i as i64) {
                    let dq = p.qty() - q_before;
                    let resid = (p.cash - before) + f.price * dq + f.fee;
                    prop_assert!(resid.abs() <= 1e-9 * (1.0 + f.price * f.qty));
                    match side {
                        Side::Buy => { cash -= f.price * f.qty + f.fee; inv += f.qty; }
                        Side::Sell => { cash += f.price * f.qty - f.fee; inv -= f.qty; }
                    }
                }
                let e = mark_to_market(&mut p, mark, i as i64).unwrap();
                let want = cash + inv * mark;
                prop_assert!((e - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }
}

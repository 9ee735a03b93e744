//! Performance metrics over an equity curve and its round-trip trades.

use serde::{Deserialize, Serialize};

use crate::execution::{Fill, Side, QTY_EPS};

pub const YEAR_SECS: f64 = 365.25 * 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub trades: u64,
    pub win_rate: f64,
    pub total_return: f64,
    pub cagr: f64,
    pub max_dd: f64,
    pub sharpe: f64,
    pub avg_ret_per_trade: f64,
    pub median_ret_per_trade: f64,
    pub equity_end: f64,
    pub fallbacks: u64,
}

/// One entry-to-flat cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub entry_ts: i64,
    pub exit_ts: i64,
    /// Cash paid for all buys, fees included.
    pub cost: f64,
    /// Cash received from all sells, net of fees.
    pub proceeds: f64,
}

impl RoundTrip {
    pub fn ret(&self) -> f64 {
        self.proceeds / self.cost - 1.0
    }
}

/// Group fills into completed round trips. A trip still open at the end is
/// not counted.
pub fn round_trips(fills: &[Fill]) -> Vec<RoundTrip> {
    let mut out = Vec::new();
    let mut open: Option<RoundTrip> = None;
    let mut qty = 0.0;
    for f in fills {
        let trip = open.get_or_insert(RoundTrip { entry_ts: f.fill_ts, exit_ts: f.fill_ts, cost: 0.0, proceeds: 0.0 });
        match f.side {
            Side::Buy => {
                trip.cost += f.qty * f.price + f.fee;
                qty += f.qty;
            }
            Side::Sell => {
                trip.proceeds += f.qty * f.price - f.fee;
                trip.exit_ts = f.fill_ts;
                qty -= f.qty;
            }
        }
        if qty <= QTY_EPS * (1.0 + f.qty) {
            qty = 0.0;
            out.extend(open.take());
        }
    }
    out
}

/// Largest peak-to-trough decline as a fraction of the peak.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        if peak > 0.0 {
            worst = worst.max((peak - v) / peak);
        }
    }
    worst
}

/// Annualized Sharpe ratio of log returns between consecutive samples,
/// using the sample standard deviation. Zero when there are fewer than two
/// returns or no variance.
pub fn sharpe(samples: &[f64], periods_per_year: f64) -> f64 {
    // Welford's running mean and variance
    let (mut n, mut mean, mut m2) = (0u64, 0.0, 0.0);
    for w in samples.windows(2) {
        let r = (w[1] / w[0]).ln();
        n += 1;
        let delta = r - mean;
        mean += delta / n as f64;
        m2 += delta * (r - mean);
    }
    if n < 2 {
        return 0.0;
    }
    let sd = (m2 / (n - 1) as f64).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return 0.0;
    }
    mean / sd * periods_per_year.sqrt()
}

/// Equity at each epoch (the last curve point at or before it) plus the
/// final value. With no epochs, every curve point is used.
pub fn epoch_samples(curve: &[(i64, f64)], epochs: &[i64]) -> Vec<f64> {
    if epochs.is_empty() {
        return curve.iter().map(|p| p.1).collect();
    }
    let mut out: Vec<f64> = epochs
        .iter()
        .filter_map(|&t| {
            let i = curve.partition_point(|p| p.0 <= t);
            (i > 0).then(|| curve[i - 1].1)
        })
        .collect();
    if let Some(&(t_last, e)) = curve.last() {
        if epochs.last().is_none_or(|&t| t < t_last) {
            out.push(e);
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of a run. `epochs` are the decision timestamps used to sample
/// equity for the Sharpe ratio.
pub fn compute_metrics(curve: &[(i64, f64)], fills: &[Fill], epochs: &[i64], fallbacks: u64) -> Metrics {
    let start = curve.first().map_or(0.0, |p| p.1);
    let end = curve.last().map_or(0.0, |p| p.1);
    let total_return = if start > 0.0 { end / start - 1.0 } else { 0.0 };
    let span = curve.last().map_or(0, |p| p.0) - curve.first().map_or(0, |p| p.0);
    let years = span as f64 / YEAR_SECS;
    let cagr = if years > 0.0 && start > 0.0 && end > 0.0 { (end / start).powf(1.0 / years) - 1.0 } else { 0.0 };
    let values: Vec<f64> = curve.iter().map(|p| p.1).collect();
    let samples = epoch_samples(curve, epochs);
    let per_year = if years > 0.0 { samples.len().saturating_sub(1) as f64 / years } else { 0.0 };

    let trips = round_trips(fills);
    let mut rets: Vec<f64> = trips.iter().map(RoundTrip::ret).collect();
    let trades = rets.len() as u64;
    let wins = trips.iter().filter(|t| t.proceeds > t.cost).count();
    let (win_rate, avg) = if trades > 0 {
        (wins as f64 / trades as f64, rets.iter().sum::<f64>() / trades as f64)
    } else {
        (0.0, 0.0)
    };
    Metrics {
        trades,
        win_rate,
        total_return,
        cagr,
        max_dd: max_drawdown(&values),
        sharpe: sharpe(&samples, per_year),
        avg_ret_per_trade: avg,
        median_ret_per_trade: median(&mut rets),
        equity_end: end,
        fallbacks,
    }
}

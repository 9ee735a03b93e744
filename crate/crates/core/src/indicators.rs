//! Technical indicators and the per-epoch indicator snapshot.
//!
//! Conventions:
//!
//! * EMA uses `alpha = 2 / (period + 1)` seeded with the first value.
//! * ATR and RSI use Wilder smoothing (`1 / period`) seeded with a simple
//!   average of the first `period` observations.
//! * MACD is (12, 26, 9); Bollinger bands are a 20-bar mean +/- 2 sample
//!   standard deviations.
//! * VWAP is anchored to the UTC day; PDH/PDL come from the previous
//!   complete UTC day.
//! * EMA21/50/200 are evaluated on completed 1-hour bars, everything else on
//!   15-minute bars.
//!
//! Every indicator is causal: its value at bar `i` depends only on bars
//! `0..=i`. [`IndicatorTable`] relies on this to precompute a whole run.

use serde::{Deserialize, Serialize};

use crate::market_data::{Bar, CandleSeries};

pub const EMA_FAST: usize = 21;
pub const EMA_MID: usize = 50;
pub const EMA_SLOW: usize = 200;
pub const RSI_PERIOD: usize = 14;
pub const ATR_PERIOD: usize = 14;
pub const MACD_FAST: usize = 12;
pub const MACD_SLOW: usize = 26;
pub const MACD_SIGNAL: usize = 9;
pub const BB_PERIOD: usize = 20;
pub const BB_WIDTH: f64 = 2.0;

const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndicatorError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("warm-up incomplete for {indicator}: need {need} bars, have {have}")]
    WarmUp {
        indicator: &'static str,
        need: usize,
        have: usize,
    },
    #[error("timestamp {0} is not a bar in the series")]
    Lookup(i64),
}

type Result<T> = std::result::Result<T, IndicatorError>;

/// The indicator set evaluated at one decision epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    pub ema21: f64,
    pub ema50: f64,
    pub ema200: f64,
    pub rsi14: f64,
    pub macd_line: f64,
    pub macd_signal: f64,
    pub macd_hist: f64,
    pub atr14: f64,
    pub bb_mid: f64,
    pub bb_upper: f64,
    pub bb_lower: f64,
    pub vwap: f64,
    pub pdh: f64,
    pub pdl: f64,
}

impl IndicatorSet {
    /// Multiply every price-valued field by `k`. RSI is scale-free.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            ema21: self.ema21 * k,
            ema50: self.ema50 * k,
            ema200: self.ema200 * k,
            rsi14: self.rsi14,
            macd_line: self.macd_line * k,
            macd_signal: self.macd_signal * k,
            macd_hist: self.macd_hist * k,
            atr14: self.atr14 * k,
            bb_mid: self.bb_mid * k,
            bb_upper: self.bb_upper * k,
            bb_lower: self.bb_lower * k,
            vwap: self.vwap * k,
            pdh: self.pdh * k,
            pdl: self.pdl * k,
        }
    }
}

fn check_period(period: usize) -> Result<()> {
    if period == 0 {
        return Err(IndicatorError::Argument("period must be >= 1".into()));
    }
    Ok(())
}

/// Exponential moving average, same length as the input.
pub fn ema(series: &[f64], period: usize) -> Result<Vec<f64>> {
    check_period(period)?;
    let Some(&first) = series.first() else {
        return Err(IndicatorError::Argument("ema of an empty series".into()));
    };
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut prev = first;
    out.push(prev);
    for &x in &series[1..] {
        prev += alpha * (x - prev);
        out.push(prev);
    }
    Ok(out)
}

/// Per-bar true range; the first bar uses `high - low`.
pub fn true_range(bars: &[Bar]) -> Vec<f64> {
    bars.iter()
        .enumerate()
        .map(|(i, b)| {
            let hl = b.high - b.low;
            if i == 0 {
                return hl;
            }
            let pc = bars[i - 1].close;
            hl.max((b.high - pc).abs()).max((b.low - pc).abs())
        })
        .collect()
}

/// Wilder average true range, same length as the input.
///
/// Before `period` bars are available the value is the running mean of the
/// true ranges seen so far; at index `period - 1` it is the simple average
/// that seeds the Wilder recursion.
pub fn atr(bars: &[Bar], period: usize) -> Result<Vec<f64>> {
    check_period(period)?;
    if bars.is_empty() {
        return Err(IndicatorError::Argument("atr of an empty series".into()));
    }
    Ok(wilder(&true_range(bars), period))
}

fn wilder(values: &[f64], period: usize) -> Vec<f64> {
    let p = period as f64;
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if i < period {
            sum += v;
            out.push(sum / (i + 1) as f64);
        } else {
            let prev = out[i - 1];
            out.push((prev * (p - 1.0) + v) / p);
        }
    }
    out
}

/// Wilder RSI.
///
/// The output has `len - period` entries; entry `j` is the RSI at price index
/// `j + period`. Zero average loss gives 100 (or 50 when the average gain is
/// also zero).
pub fn rsi(series: &[f64], period: usize) -> Result<Vec<f64>> {
    check_period(period)?;
    if series.len() < period + 1 {
        return Err(IndicatorError::Argument(format!(
            "rsi({period}) needs at least {} prices, got {}",
            period + 1,
            series.len()
        )));
    }
    let p = period as f64;
    let (mut gain, mut loss) = (0.0, 0.0);
    for w in series[..=period].windows(2) {
        let d = w[1] - w[0];
        if d > 0.0 {
            gain += d;
        } else {
            loss -= d;
        }
    }
    gain /= p;
    loss /= p;
    let mut out = Vec::with_capacity(series.len() - period);
    out.push(rsi_value(gain, loss));
    for w in series[period..].windows(2) {
        let d = w[1] - w[0];
        gain = (gain * (p - 1.0) + d.max(0.0)) / p;
        loss = (loss * (p - 1.0) + (-d).max(0.0)) / p;
        out.push(rsi_value(gain, loss));
    }
    Ok(out)
}

fn rsi_value(avg_gain: f64, avg_loss: f64) -> f64 {
    if avg_loss == 0.0 {
        if avg_gain == 0.0 {
            50.0
        } else {
            100.0
        }
    } else {
        100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    }
}

/// MACD line, signal and histogram, each the length of the input.
pub fn macd(series: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let fast = ema(series, MACD_FAST)?;
    let slow = ema(series, MACD_SLOW)?;
    let line: Vec<f64> = fast.iter().zip(&slow).map(|(f, s)| f - s).collect();
    let signal = ema(&line, MACD_SIGNAL)?;
    let hist = line.iter().zip(&signal).map(|(l, s)| l - s).collect();
    Ok((line, signal, hist))
}

/// Bollinger band `(mid, upper, lower)` over the `period` values ending at
/// `end` (inclusive), using the sample standard deviation.
pub fn bollinger_at(series: &[f64], end: usize, period: usize, width: f64) -> Option<(f64, f64, f64)> {
    if period < 2 || end + 1 < period || end >= series.len() {
        return None;
    }
    let w = &series[end + 1 - period..=end];
    let mean = w.iter().sum::<f64>() / period as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (period - 1) as f64;
    let sd = var.sqrt();
    Some((mean, mean + width * sd, mean - width * sd))
}

/// Session (UTC day) anchored VWAP for every bar. A session with no volume
/// so far falls back to the current bar's typical price.
pub fn session_vwap(bars: &[Bar]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bars.len());
    let (mut day, mut pv, mut vol) = (i64::MIN, 0.0, 0.0);
    for b in bars {
        let d = b.ts.div_euclid(DAY);
        if d != day {
            day = d;
            pv = 0.0;
            vol = 0.0;
        }
        pv += b.typical_price() * b.volume;
        vol += b.volume;
        out.push(if vol > 0.0 { pv / vol } else { b.typical_price() });
    }
    out
}

/// `(pdh, pdl)` for every bar: the high/low of the previous UTC day when that
/// day is fully covered by the series.
pub fn previous_day_range(bars: &[Bar], interval: i64) -> Vec<Option<(f64, f64)>> {
    let per_day = (DAY / interval.max(1)) as usize;
    // complete days: (day, high, low)
    let mut days: Vec<(i64, f64, f64, usize, bool)> = Vec::new();
    for b in bars {
        let d = b.ts.div_euclid(DAY);
        match days.last_mut() {
            Some(last) if last.0 == d => {
                last.1 = last.1.max(b.high);
                last.2 = last.2.min(b.low);
                last.3 += 1;
            }
            _ => days.push((d, b.high, b.low, 1, b.ts == d * DAY)),
        }
    }
    let complete = |e: &(i64, f64, f64, usize, bool)| e.4 && e.3 == per_day;
    let mut out = Vec::with_capacity(bars.len());
    let mut k = 0;
    for b in bars {
        let d = b.ts.div_euclid(DAY);
        while days[k].0 != d {
            k += 1;
        }
        let prev = (k > 0 && days[k - 1].0 == d - 1 && complete(&days[k - 1]))
            .then(|| (days[k - 1].1, days[k - 1].2));
        out.push(prev);
    }
    out
}

/// Number of 1-hour bars that have closed by the end of the 15-minute bar
/// opened at `t`.
fn completed_h1(h1: &CandleSeries, t: i64, m15_interval: i64) -> usize {
    h1.bars
        .partition_point(|b| b.ts + h1.interval <= t + m15_interval)
}

fn warm(indicator: &'static str, need: usize, have: usize) -> Result<()> {
    if have < need {
        return Err(IndicatorError::WarmUp { indicator, need, have });
    }
    Ok(())
}

/// Minimum 15-minute history for the m15-sourced indicators.
pub const M15_WARMUP: usize = MACD_SLOW + MACD_SIGNAL;

/// Evaluate the full indicator set at the 15-minute bar opened at `t`,
/// using only data available at the close of that bar.
pub fn indicator_snapshot(m15: &CandleSeries, h1: &CandleSeries, t: i64) -> Result<IndicatorSet> {
    let idx = m15.index_of(t).ok_or(IndicatorError::Lookup(t))?;
    let bars = &m15.bars[..=idx];
    let n_h1 = completed_h1(h1, t, m15.interval);
    warm("ema200", EMA_SLOW, n_h1)?;
    warm("rsi14", RSI_PERIOD + 1, bars.len())?;
    warm("atr14", ATR_PERIOD, bars.len())?;
    warm("bb20", BB_PERIOD, bars.len())?;
    warm("macd", M15_WARMUP, bars.len())?;

    let (pdh, pdl) = previous_day_range(bars, m15.interval)[idx].ok_or(IndicatorError::WarmUp {
        indicator: "pdh/pdl",
        need: (DAY / m15.interval) as usize,
        have: bars.len(),
    })?;

    let h1_closes: Vec<f64> = h1.bars[..n_h1].iter().map(|b| b.close).collect();
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let last = |v: Vec<f64>| *v.last().expect("non-empty");
    let (line, signal, hist) = macd(&closes)?;
    let (bb_mid, bb_upper, bb_lower) =
        bollinger_at(&closes, idx, BB_PERIOD, BB_WIDTH).expect("warm-up checked");
    Ok(IndicatorSet {
        ema21: last(ema(&h1_closes, EMA_FAST)?),
        ema50: last(ema(&h1_closes, EMA_MID)?),
        ema200: last(ema(&h1_closes, EMA_SLOW)?),
        rsi14: last(rsi(&closes, RSI_PERIOD)?),
        macd_line: last(line),
        macd_signal: last(signal),
        macd_hist: last(hist),
        atr14: last(atr(bars, ATR_PERIOD)?),
        bb_mid,
        bb_upper,
        bb_lower,
        vwap: last(session_vwap(bars)),
        pdh,
        pdl,
    })
}

/// Indicator sets for every 15-minute bar of a run, computed in one pass.
///
/// Because each indicator is causal, entry `i` equals
/// `indicator_snapshot(m15, h1, m15.bars[i].ts)` evaluated on data truncated
/// at that bar.
#[derive(Debug, Clone)]
pub struct IndicatorTable {
    sets: Vec<Result<IndicatorSet>>,
    /// ATR14 / close per 15-minute bar, the volatility input of the regime
    /// classifier.
    pub atr_ratio: Vec<f64>,
}

impl IndicatorTable {
    pub fn build(m15: &CandleSeries, h1: &CandleSeries) -> Result<Self> {
        let n = m15.len();
        if n == 0 {
            return Ok(Self { sets: Vec::new(), atr_ratio: Vec::new() });
        }
        let closes = m15.closes();
        let h1_closes = h1.closes();
        let (e21, e50, e200) = if h1_closes.is_empty() {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            (
                ema(&h1_closes, EMA_FAST)?,
                ema(&h1_closes, EMA_MID)?,
                ema(&h1_closes, EMA_SLOW)?,
            )
        };
        let rsi_v = if n > RSI_PERIOD { rsi(&closes, RSI_PERIOD)? } else { Vec::new() };
        let atr_v = atr(&m15.bars, ATR_PERIOD)?;
        let (line, signal, hist) = macd(&closes)?;
        let vwap = session_vwap(&m15.bars);
        let pd = previous_day_range(&m15.bars, m15.interval);

        let mut sets = Vec::with_capacity(n);
        let mut h1_done = 0usize;
        for i in 0..n {
            let t = m15.bars[i].ts;
            while h1_done < h1.len() && h1.bars[h1_done].ts + h1.interval <= t + m15.interval {
                h1_done += 1;
            }
            let have = i + 1;
            let entry = (|| {
                warm("ema200", EMA_SLOW, h1_done)?;
                warm("rsi14", RSI_PERIOD + 1, have)?;
                warm("atr14", ATR_PERIOD, have)?;
                warm("bb20", BB_PERIOD, have)?;
                warm("macd", M15_WARMUP, have)?;
                let (pdh, pdl) = pd[i].ok_or(IndicatorError::WarmUp {
                    indicator: "pdh/pdl",
                    need: (DAY / m15.interval) as usize,
                    have,
                })?;
                let (bb_mid, bb_upper, bb_lower) =
                    bollinger_at(&closes, i, BB_PERIOD, BB_WIDTH).expect("warm-up checked");
                let h = h1_done - 1;
                Ok(IndicatorSet {
                    ema21: e21[h],
                    ema50: e50[h],
                    ema200: e200[h],
                    rsi14: rsi_v[i - RSI_PERIOD],
                    macd_line: line[i],
                    macd_signal: signal[i],
                    macd_hist: hist[i],
                    atr14: atr_v[i],
                    bb_mid,
                    bb_upper,
                    bb_lower,
                    vwap: vwap[i],
                    pdh,
                    pdl,
                })
            })();
            sets.push(entry);
        }
        let atr_ratio = atr_v.iter().zip(&closes).map(|(a, c)| a / c).collect();
        Ok(Self { sets, atr_ratio })
    }

    pub fn get(&self, i: usize) -> Result<IndicatorSet> {
        self.sets[i].clone()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

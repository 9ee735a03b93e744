//! Replay buffer of distilled trade experiences with half-life decay and
//! top-K contextual retrieval.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::market_data::Bar;
use crate::regime::{LiquidityState, RegimeLabel, VolatilityState};
use crate::strategist::MarketSnapshot;

pub const DAY_SECS: i64 = 86_400;
pub const DEFAULT_HALF_LIFE: i64 = 30 * DAY_SECS;
pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_K: usize = 5;
pub const EMBED_DIM: usize = 64;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("experience id {0} already stored")]
    Duplicate(String),
    #[error("decay evaluated at {now}, before creation at {created_at}")]
    Temporal { now: i64, created_at: i64 },
    #[error("invalid experience {id}: {msg}")]
    Invalid { id: String, msg: String },
    #[error("invalid buffer configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

/// Realized-return horizons measured after a trade entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Horizon {
    H4,
    H8,
    H24,
    D7,
}

impl Horizon {
    pub const ALL: [Horizon; 4] = [Horizon::H4, Horizon::H8, Horizon::H24, Horizon::D7];

    pub fn secs(self) -> i64 {
        match self {
            Horizon::H4 => 4 * 3600,
            Horizon::H8 => 8 * 3600,
            Horizon::H24 => 24 * 3600,
            Horizon::D7 => 7 * DAY_SECS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Horizon::H4 => "4h",
            Horizon::H8 => "8h",
            Horizon::H24 => "24h",
            Horizon::D7 => "7d",
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Horizon {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Horizon::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| format!("unknown horizon {s:?}"))
    }
}

impl Serialize for Horizon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub id: String,
    pub created_at: i64,
    pub context_embed: Vec<f64>,
    pub regime_label: RegimeLabel,
    pub pattern: String,
    pub cost_bps: f64,
    pub horizon_returns: BTreeMap<Horizon, f64>,
    pub lesson: String,
}

impl Experience {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let invalid = |msg: String| MemoryError::Invalid { id: self.id.clone(), msg };
        let norm = l2_norm(&self.context_embed);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
            return Err(invalid(format!("embedding norm {norm} is not 1")));
        }
        if self.horizon_returns.values().any(|r| !r.is_finite()) || !self.cost_bps.is_finite() {
            return Err(invalid("non-finite return or cost".into()));
        }
        Ok(())
    }

    pub fn mean_return_bps(&self) -> Option<f64> {
        if self.horizon_returns.is_empty() {
            return None;
        }
        Some(self.horizon_returns.values().sum::<f64>() / self.horizon_returns.len() as f64)
    }
}

/// `exp(-ln2 * age / half_life)`: 1 at creation, 0.5 after one half-life.
pub fn decay_weight(e: &Experience, now: i64, half_life: i64) -> Result<f64, MemoryError> {
    if now < e.created_at {
        return Err(MemoryError::Temporal { now, created_at: e.created_at });
    }
    Ok(decay(now - e.created_at, half_life))
}

fn decay(age: i64, half_life: i64) -> f64 {
    (-std::f64::consts::LN_2 * age as f64 / half_life as f64).exp()
}

/// Retrieval score of one entry. Negative cosine similarity is clamped to
/// zero so the score stays in `[0, 1]`.
pub fn retrieval_score(e: &Experience, query: &[f64], query_regime: RegimeLabel, alpha: f64, now: i64, half_life: i64) -> f64 {
    let cos = dot(query, &e.context_embed).clamp(0.0, 1.0);
    let regime = if e.regime_label == query_regime { 1.0 } else { 0.0 };
    decay(now - e.created_at, half_life) * (alpha * cos + (1.0 - alpha) * regime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    entries: Vec<Experience>,
    ids: HashSet<String>,
    pub half_life: i64,
    pub capacity: usize,
}

impl ReplayBuffer {
    pub fn new(half_life: i64, capacity: usize) -> Result<Self, MemoryError> {
        if half_life <= 0 {
            return Err(MemoryError::Config(format!("half_life must be positive, got {half_life}")));
        }
        if capacity == 0 {
            return Err(MemoryError::Config("capacity must be at least 1".into()));
        }
        Ok(Self { entries: Vec::new(), ids: HashSet::new(), half_life, capacity })
    }

    pub fn entries(&self) -> &[Experience] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Store `e`, evicting the lowest-weight entry (oldest on ties) when over
    /// capacity. Returns the evicted entry, if any.
    pub fn insert(&mut self, e: Experience) -> Result<Option<Experience>, MemoryError> {
        e.validate()?;
        if self.ids.contains(&e.id) {
            return Err(MemoryError::Duplicate(e.id));
        }
        self.ids.insert(e.id.clone());
        self.entries.push(e);
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let now = self.entries.iter().map(|x| x.created_at).max().expect("non-empty");
        let victim = self
            .entries
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                decay(now - a.created_at, self.half_life)
                    .total_cmp(&decay(now - b.created_at, self.half_life))
                    .then(a.created_at.cmp(&b.created_at))
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|(i, _)| i)
            .expect("non-empty");
        let evicted = self.entries.remove(victim);
        self.ids.remove(&evicted.id);
        Ok(Some(evicted))
    }

    /// The `k` best entries for `query`, best first. Entries created after
    /// `now` are not yet visible and are skipped.
    pub fn retrieve_top_k(&self, query: &[f64], query_regime: RegimeLabel, k: usize, alpha: f64, now: i64) -> Vec<&Experience> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
        for (idx, e) in self.entries.iter().enumerate() {
            if e.created_at > now {
                continue;
            }
            let r = Ranked {
                score: retrieval_score(e, query, query_regime, alpha, now, self.half_life),
                created_at: e.created_at,
                id: &e.id,
                idx,
            };
            if heap.len() < k {
                heap.push(Reverse(r));
            } else if heap.peek().is_some_and(|worst| r > worst.0) {
                heap.pop();
                heap.push(Reverse(r));
            }
        }
        let mut ranked: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        ranked.into_iter().map(|r| &self.entries[r.idx]).collect()
    }

    pub fn load(path: impl AsRef<Path>, half_life: i64, capacity: usize) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let mut buf = Self::new(half_life, capacity)?;
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io { path: path.into(), source })?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Experience = serde_json::from_str(line).map_err(|err| MemoryError::Parse {
                path: path.into(),
                line: i + 1,
                msg: err.to_string(),
            })?;
            buf.insert(e)?;
        }
        Ok(buf)
    }

    /// Rewrite the whole store, one experience per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("experience serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| MemoryError::Io { path: path.into(), source })
    }

    /// Append one experience to an existing store.
    pub fn append(path: impl AsRef<Path>, e: &Experience) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let io = |source| MemoryError::Io { path: path.into(), source };
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        writeln!(f, "{}", serde_json::to_string(e).expect("experience serializes")).map_err(io)
    }
}

/// Ranking key: higher score, then newer, then smaller id is better.
#[derive(Debug)]
struct Ranked<'a> {
    score: f64,
    created_at: i64,
    id: &'a str,
    idx: usize,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.created_at.cmp(&other.created_at))
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit length. A zero vector maps to the first basis vector.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
    v
}

/// Maps a market snapshot to a unit vector for similarity search.
pub trait Embedder {
    fn embed(&self, d: &MarketSnapshot) -> Vec<f64>;
}

/// Built-in embedding from numeric snapshot features.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureEmbedder;

impl Embedder for FeatureEmbedder {
    fn embed(&self, d: &MarketSnapshot) -> Vec<f64> {
        embed_snapshot(d)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b != 0.0 && a.is_finite() && b.is_finite() {
        a / b - 1.0
    } else {
        0.0
    }
}

fn squash(x: f64, scale: f64) -> f64 {
    if x.is_finite() {
        (x * scale).tanh()
    } else {
        0.0
    }
}

fn lookback_return(bars: &[Bar], n: usize) -> f64 {
    match bars.len().checked_sub(n + 1) {
        Some(i) => ratio(bars[bars.len() - 1].close, bars[i].close),
        None => 0.0,
    }
}

fn one_hot<T: PartialEq + Copy>(all: &[T], v: T) -> impl Iterator<Item = f64> + '_ {
    all.iter().map(move |&x| if x == v { 1.0 } else { 0.0 })
}

/// Deterministic 64-dimensional unit embedding of a snapshot.
///
/// Layout: 14 indicator features, 6 m15 and 4 h1 lookback returns, regime,
/// volatility and liquidity one-hots, two sentiment values, realized
/// volatility, relative volume and the last 28 one-bar returns. Every numeric
/// feature is squashed with `tanh` so no single input dominates.
pub fn embed_snapshot(d: &MarketSnapshot) -> Vec<f64> {
    let ind = &d.ind;
    let close = d.o15.last().map_or(ind.bb_mid, |b| b.close);
    let mut v = Vec::with_capacity(EMBED_DIM);
    let band = ind.bb_upper - ind.bb_lower;
    let day = ind.pdh - ind.pdl;
    v.extend([
        squash(ratio(close, ind.ema21), 50.0),
        squash(ratio(ind.ema21, ind.ema50), 50.0),
        squash(ratio(ind.ema50, ind.ema200), 20.0),
        squash(ratio(close, ind.ema200), 10.0),
        (ind.rsi14 - 50.0) / 50.0,
        squash(ind.macd_line / close, 200.0),
        squash(ind.macd_signal / close, 200.0),
        squash(ind.macd_hist / close, 500.0),
        squash(ind.atr14 / close, 200.0),
        if band > 0.0 { squash(2.0 * (close - ind.bb_lower) / band - 1.0, 1.0) } else { 0.0 },
        squash(band / ind.bb_mid, 50.0),
        squash(ratio(close, ind.vwap), 50.0),
        if day > 0.0 { squash(2.0 * (close - ind.pdl) / day - 1.0, 1.0) } else { 0.0 },
        squash(ratio(ind.pdh, ind.pdl), 20.0),
    ]);
    for n in [1, 4, 16, 32, 64, 95] {
        v.push(squash(lookback_return(&d.o15, n), 30.0));
    }
    for n in [1, 4, 12, 23] {
        v.push(squash(lookback_return(&d.o1h, n), 20.0));
    }
    v.extend(one_hot(&RegimeLabel::ALL, d.regime.label));
    v.extend(one_hot(&VolatilityState::ALL, d.regime.volatility_state));
    v.extend(one_hot(&[LiquidityState::Deep, LiquidityState::Thin], d.regime.liquidity_state));
    v.push(d.evidence.aggregate_sentiment);
    v.push(d.regime.macro_sentiment);

    let rets: Vec<f64> = d.o15.windows(2).map(|w| ratio(w[1].close, w[0].close)).collect();
    let realized = if rets.len() > 1 {
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        (rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rets.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    v.push(squash(realized, 200.0));
    let mean_vol = d.o15.iter().map(|b| b.volume).sum::<f64>() / d.o15.len().max(1) as f64;
    v.push(squash(ratio(d.o15.last().map_or(0.0, |b| b.volume), mean_vol), 1.0));

    let tail = EMBED_DIM - v.len();
    let skip = rets.len().saturating_sub(tail);
    let recent = &rets[skip..];
    v.extend(std::iter::repeat_n(0.0, tail - recent.len()));
    v.extend(recent.iter().map(|&r| squash(r, 100.0)));
    debug_assert_eq!(v.len(), EMBED_DIM);
    normalize(v)
}

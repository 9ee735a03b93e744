//! News and social items consolidated with the market state into one
//! evidence document per decision epoch.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::indicators::IndicatorSet;
use crate::regime::RegimeSnapshot;

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvidenceSource {
    News,
    Social,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub ts: i64,
    pub source: EvidenceSource,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<f64>,
}

impl EvidenceItem {
    fn is_valid(&self) -> bool {
        self.ts > 0 && self.sentiment.is_none_or(|s| (-1.0..=1.0).contains(&s))
    }

    /// Canonical order: newest first, then source, text and sentiment.
    fn newest_first(a: &Self, b: &Self) -> Ordering {
        b.ts.cmp(&a.ts)
            .then(a.source.cmp(&b.source))
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| {
                let key = |s: Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
                key(a.sentiment).total_cmp(&key(b.sentiment))
            })
    }
}

/// Items read from a feed plus the number of lines that failed to parse or
/// validate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Feed {
    pub items: Vec<EvidenceItem>,
    pub skipped: usize,
}

/// Read a JSONL evidence feed, sorted ascending by timestamp. Malformed lines
/// are skipped and counted.
pub fn ingest_feed(path: impl AsRef<Path>) -> Result<Feed, EvidenceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvidenceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut feed = Feed::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<EvidenceItem>(line) {
            Ok(item) if item.is_valid() => feed.items.push(item),
            _ => feed.skipped += 1,
        }
    }
    if feed.skipped > 0 {
        warn!(path = %path.display(), skipped = feed.skipped, "skipped malformed evidence lines");
    }
    feed.items.sort_by_key(|i| i.ts);
    Ok(feed)
}

/// The consolidated evidence document handed to the decision policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceDocument {
    pub as_of: i64,
    /// Newest first, at most the configured cap.
    pub items: Vec<EvidenceItem>,
    pub aggregate_sentiment: f64,
    pub market_summary: String,
}

/// Items in `[as_of - lookback, as_of]`, newest first, at most `cap`.
pub fn select_window(items: &[EvidenceItem], as_of: i64, cap: usize, lookback: i64) -> Vec<EvidenceItem> {
    let mut kept: Vec<EvidenceItem> = items
        .iter()
        .filter(|i| i.ts <= as_of && i.ts >= as_of - lookback)
        .cloned()
        .collect();
    kept.sort_by(EvidenceItem::newest_first);
    kept.truncate(cap);
    kept
}

/// Recency-weighted mean sentiment with weights `exp(-age / lookback)`.
/// Items without a sentiment score are ignored; no scores gives 0.
pub fn aggregate_sentiment(selected: &[EvidenceItem], as_of: i64, lookback: i64) -> f64 {
    let mut scored: Vec<(i64, f64)> = selected
        .iter()
        .filter_map(|i| i.sentiment.map(|s| (i.ts, s)))
        .collect();
    // summation order is fixed so the result does not depend on input order
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (mut num, mut den) = (0.0, 0.0);
    for (ts, s) in scored {
        let w = (-((as_of - ts) as f64) / lookback.max(1) as f64).exp();
        num += w * s;
        den += w;
    }
    if den > 0.0 {
        (num / den).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

pub fn build_evidence(
    items: &[EvidenceItem],
    as_of: i64,
    ind: &IndicatorSet,
    regime: &RegimeSnapshot,
    cap: usize,
    lookback: i64,
) -> EvidenceDocument {
    let selected = select_window(items, as_of, cap, lookback);
    let aggregate_sentiment = aggregate_sentiment(&selected, as_of, lookback);
    EvidenceDocument {
        as_of,
        market_summary: render_market_summary(ind, regime),
        items: selected,
        aggregate_sentiment,
    }
}

/// Fixed-format text block describing indicators and regime.
pub fn render_market_summary(ind: &IndicatorSet, regime: &RegimeSnapshot) -> String {
    format!(
        "regime: {} | volatility: {} | liquidity: {:?} | macro_sentiment: {:+.4}\n\
         ema21: {:.4} | ema50: {:.4} | ema200: {:.4}\n\
         rsi14: {:.2} | macd: {:.4} / signal {:.4} / hist {:.4}\n\
         atr14: {:.4} | bb: {:.4} [{:.4}, {:.4}]\n\
         vwap: {:.4} | pdh: {:.4} | pdl: {:.4}",
        regime.label.as_str(),
        regime.volatility_state.as_str(),
        regime.liquidity_state,
        regime.macro_sentiment,
        ind.ema21,
        ind.ema50,
        ind.ema200,
        ind.rsi14,
        ind.macd_line,
        ind.macd_signal,
        ind.macd_hist,
        ind.atr14,
        ind.bb_mid,
        ind.bb_lower,
        ind.bb_upper,
        ind.vwap,
        ind.pdh,
        ind.pdl,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::{LiquidityState, RegimeLabel, VolatilityState};
    use proptest::prelude::*;

    fn item(ts: i64, s: Option<f64>) -> EvidenceItem {
        EvidenceItem { ts, source: EvidenceSource::News, text: format!("item {ts}"), sentiment: s }
    }

    fn ind() -> IndicatorSet {
        IndicatorSet {
            ema21: 1.0, ema50: 1.0, ema200: 1.0, rsi14: 50.0, macd_line: 0.0, macd_signal: 0.0,
            macd_hist: 0.0, atr14: 0.0, bb_mid: 1.0, bb_upper: 1.0, bb_lower: 1.0, vwap: 1.0,
            pdh: 1.0, pdl: 1.0,
        }
    }

    fn regime() -> RegimeSnapshot {
        RegimeSnapshot {
            label: RegimeLabel::Neutral,
            volatility_state: VolatilityState::Normal,
            macro_sentiment: 0.0,
            liquidity_state: LiquidityState::Deep,
        }
    }

    #[test]
    fn ingest_skips_malformed_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feed.jsonl");
        fs::write(&p, "").unwrap();
        assert_eq!(ingest_feed(&p).unwrap(), Feed::default());
        fs::write(
            &p,
            concat!(
                "{\"ts\":30,\"source\":\"NEWS\",\"text\":\"c\",\"sentiment\":0.2}\n",
                "{\"ts\":10,\"source\":\"SOCIAL\",\"text\":\"a\"}\n",
                "not json\n",
                "{\"ts\":20,\"source\":\"NEWS\",\"text\":\"b\",\"sentiment\":-1.0}\n",
            ),
        )
        .unwrap();
        let feed = ingest_feed(&p).unwrap();
        assert_eq!(feed.skipped, 1);
        assert_eq!(feed.items.iter().map(|i| i.ts).collect::<Vec<_>>(), vec![10, 20, 30]);
        // out-of-range sentiment counts as malformed
        fs::write(&p, "{\"ts\":30,\"source\":\"NEWS\",\"text\":\"c\",\"sentiment\":1.5}\n").unwrap();
        assert_eq!(ingest_feed(&p).unwrap().skipped, 1);
    }

    #[test]
    fn empty_window_gives_neutral_document() {
        let doc = build_evidence(&[item(5_000, Some(0.9))], 1_000, &ind(), &regime(), 10, 3_600);
        assert!(doc.items.is_empty());
        assert_eq!(doc.aggregate_sentiment, 0.0);
    }

    #[test]
    fn single_item_mean() {
        let doc = build_evidence(&[item(1_000, Some(0.8))], 1_000, &ind(), &regime(), 10, 3_600);
        assert_eq!(doc.aggregate_sentiment, 0.8);
    }

    #[test]
    fn two_item_recency_weighting() {
        let lookback = 3_600;
        let items = [item(10_000, Some(1.0)), item(10_000 - lookback, Some(-1.0))];
        let doc = build_evidence(&items, 10_000, &ind(), &regime(), 10, lookback);
        let e = (-1.0f64).exp();
        let want = (1.0 - e) / (1.0 + e);
        assert!((doc.aggregate_sentiment - want).abs() < 1e-15);
        assert!((doc.aggregate_sentiment - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn cap_keeps_newest() {
        let items: Vec<_> = (1..=10).map(|t| item(t * 10, None)).collect();
        let doc = build_evidence(&items, 100, &ind(), &regime(), 3, 1_000);
        assert_eq!(doc.items.iter().map(|i| i.ts).collect::<Vec<_>>(), vec![100, 90, 80]);
    }

    proptest! {
        #[test]
        fn never_leaks_future_items(ts in prop::collection::vec(1i64..2_000, 0..40), as_of in 500i64..1_500) {
            let items: Vec<_> = ts.iter().map(|&t| item(t, Some(0.1))).collect();
            let doc = build_evidence(&items, as_of, &ind(), &regime(), 100, 10_000);
            prop_assert!(doc.items.iter().all(|i| i.ts <= as_of));
        }

        #[test]
        fn order_does_not_matter(
            raw in prop::collection::vec((1i64..1_000, -1.0f64..1.0), 1..30),
            seed in any::<u64>(),
        ) {
            let items: Vec<_> = raw.iter().map(|&(t, s)| item(t, Some(s))).collect();
            let mut shuffled = items.clone();
            // deterministic Fisher-Yates driven by the seed
            let mut x = seed | 1;
            for i in (1..shuffled.len()).rev() {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                shuffled.swap(i, (x % (i as u64 + 1)) as usize);
            }
            let a = build_evidence(&items, 1_000, &ind(), &regime(), 8, 600);
            let b = build_evidence(&shuffled, 1_000, &ind(), &regime(), 8, 600);
            prop_assert_eq!(a.aggregate_sentiment.to_bits(), b.aggregate_sentiment.to_bits());
            prop_assert_eq!(a, b);
        }
    }
}

//! Post-trade reflection: multi-horizon realized returns, a structured
//! reflection from the policy, and distillation into a replay experience.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::market_data::CandleSeries;
use crate::memory::{Experience, Horizon};
use crate::model_gateway::{FallbackCounter, FallbackReason, ReflectionPolicy};
use crate::regime::RegimeLabel;
use crate::strategist::DecisionTuple;

pub const DEFAULT_BAND_BPS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReflectionError {
    #[error("entry at {0} is not a bar of the series")]
    UnknownEntry(i64),
    #[error("no horizon reachable from entry at {0}")]
    Unreachable(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeLabel {
    Win,
    Loss,
    BreakEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatternValidity {
    Confirmed,
    Weakened,
    Invalidated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostTradeTuple {
    pub snapshot_digest: String,
    pub decision: DecisionTuple,
    pub entry_price: f64,
    pub entry_t: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_t: Option<i64>,
    pub cost_bps: f64,
    /// Net of round-trip costs.
    pub horizon_returns: BTreeMap<Horizon, f64>,
}

impl PostTradeTuple {
    /// Net return at the longest reachable horizon.
    pub fn longest(&self) -> Option<(Horizon, f64)> {
        self.horizon_returns.iter().next_back().map(|(&h, &r)| (h, r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub outcome_label: OutcomeLabel,
    pub attribution: String,
    pub lesson: String,
    pub pattern_validity: PatternValidity,
}

/// Net basis-point return from `entry_price` to the close of the bar opened
/// at `entry_t + h`, for every horizon that bar exists.
pub fn horizon_returns(
    entry_price: f64,
    entry_t: i64,
    series: &CandleSeries,
    round_trip_cost_bps: f64,
) -> Result<BTreeMap<Horizon, f64>, ReflectionError> {
    series.index_of(entry_t).ok_or(ReflectionError::UnknownEntry(entry_t))?;
    let out: BTreeMap<Horizon, f64> = Horizon::ALL
        .into_iter()
        .filter_map(|h| {
            let i = series.index_of(entry_t + h.secs())?;
            let close = series.bars[i].close;
            Some((h, 10_000.0 * (close - entry_price) / entry_price - round_trip_cost_bps))
        })
        .collect();
    if out.is_empty() {
        return Err(ReflectionError::Unreachable(entry_t));
    }
    Ok(out)
}

pub fn label_outcome(net_bps: f64, band_bps: f64) -> OutcomeLabel {
    if net_bps > band_bps {
        OutcomeLabel::Win
    } else if net_bps < -band_bps {
        OutcomeLabel::Loss
    } else {
        OutcomeLabel::BreakEven
    }
}

/// The reflection used when the policy output is unusable.
pub fn fallback_reflection(tau: &PostTradeTuple, band_bps: f64) -> Reflection {
    let net = tau.longest().map_or(0.0, |(_, r)| r);
    Reflection {
        outcome_label: label_outcome(net, band_bps),
        attribution: "unattributed".into(),
        lesson: "policy reflection unavailable".into(),
        pattern_validity: PatternValidity::Weakened,
    }
}

/// Ask the policy for a reflection, falling back (and counting it) on failure.
pub fn reflect(
    tau: &PostTradeTuple,
    policy: &mut dyn ReflectionPolicy,
    band_bps: f64,
    fallbacks: &mut FallbackCounter,
) -> (Reflection, Option<String>) {
    match policy.reflect(tau) {
        Ok(r) if !r.attribution.trim().is_empty() => (r, None),
        Ok(_) => {
            fallbacks.record(FallbackReason::Schema);
            (fallback_reflection(tau, band_bps), Some("SCHEMA: empty attribution".into()))
        }
        Err(failure) => {
            fallbacks.record(failure.reason);
            (fallback_reflection(tau, band_bps), Some(failure.to_string()))
        }
    }
}

/// Short machine tag from a free-text attribution.
pub fn pattern_tag(attribution: &str) -> String {
    let mut tag = String::new();
    for word in attribution.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()) {
        if !tag.is_empty() {
            tag.push('_');
        }
        tag.push_str(&word.to_ascii_lowercase());
        if tag.len() >= 32 {
            break;
        }
    }
    tag.truncate(32);
    if tag.is_empty() {
        tag.push_str("untagged");
    }
    tag
}

pub fn distill(tau: &PostTradeTuple, f: &Reflection, embed: Vec<f64>, regime: RegimeLabel, now: i64) -> Experience {
    let short = &tau.snapshot_digest[..tau.snapshot_digest.len().min(12)];
    Experience {
        id: format!("{}-{short}", tau.entry_t),
        created_at: now,
        context_embed: embed,
        regime_label: regime,
        pattern: pattern_tag(&f.attribution),
        cost_bps: tau.cost_bps,
        horizon_returns: tau.horizon_returns.clone(),
        lesson: f.lesson.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::Bar;
    use crate::memory::{normalize, ReplayBuffer, DEFAULT_HALF_LIFE};
    use crate::model_gateway::{PolicyFailure, StubPolicy};
    use proptest::prelude::*;

    fn series(closes: &[f64]) -> CandleSeries {
        let bars = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| Bar { ts: i as i64 * 900, open: c, high: c, low: c, close: c, volume: 1.0 })
            .collect();
        CandleSeries::new("T", 900, bars)
    }

    fn tau(returns: &[(Horizon, f64)]) -> PostTradeTuple {
        PostTradeTuple {
            snapshot_digest: "ab".repeat(32),
            decision: DecisionTuple::fallback(),
            entry_price: 100.0,
            entry_t: 0,
            exit_price: None,
            exit_t: None,
            cost_bps: 20.0,
            horizon_returns: returns.iter().copied().collect(),
        }
    }

    #[test]
    fn four_hour_return_net_of_cost() {
        let mut closes = vec![100.0; 20];
        closes[16] = 101.0;
        let r = horizon_returns(100.0, 0, &series(&closes), 20.0).unwrap();
        assert!((r[&Horizon::H4] - 80.0).abs() < 1e-9);
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn flat_path_and_reachability() {
        let s = series(&vec![50.0; 96 * 7]);
        let r = horizon_returns(50.0, 0, &s, 0.0).unwrap();
        assert_eq!(r.keys().copied().collect::<Vec<_>>(), [Horizon::H4, Horizon::H8, Horizon::H24]);
        assert!(r.values().all(|&v| v == 0.0));
        assert_eq!(horizon_returns(50.0, 7, &s, 0.0), Err(ReflectionError::UnknownEntry(7)));
        let last = s.bars.last().unwrap().ts;
        assert_eq!(horizon_returns(50.0, last, &s, 0.0), Err(ReflectionError::Unreachable(last)));
    }

    #[test]
    fn outcome_labels() {
        assert_eq!(label_outcome(0.0, 10.0), OutcomeLabel::BreakEven);
        assert_eq!(label_outcome(80.0, 10.0), OutcomeLabel::Win);
        assert_eq!(label_outcome(-10.0001, 10.0), OutcomeLabel::Loss);
        assert_eq!(label_outcome(10.0, 10.0), OutcomeLabel::BreakEven);
    }

    #[test]
    fn stub_reflection_maps_outcome() {
        let t = tau(&[(Horizon::H4, 80.0)]);
        let mut stub = StubPolicy::default();
        let mut counter = FallbackCounter::default();
        let (a, note) = reflect(&t, &mut stub, DEFAULT_BAND_BPS, &mut counter);
        assert!(note.is_none());
        assert_eq!(a.outcome_label, OutcomeLabel::Win);
        assert_eq!(a.pattern_validity, PatternValidity::Confirmed);
        let (b, _) = reflect(&t, &mut stub, DEFAULT_BAND_BPS, &mut counter);
        assert_eq!(a, b);
        assert_eq!(counter.count, 0);
    }

    struct Broken;
    impl ReflectionPolicy for Broken {
        fn reflect(&mut self, _: &PostTradeTuple) -> Result<Reflection, PolicyFailure> {
            Err(PolicyFailure::new(FallbackReason::Parse, "no object in response"))
        }
    }

    #[test]
    fn malformed_reflection_falls_back() {
        let t = tau(&[(Horizon::H4, 80.0), (Horizon::H24, -40.0)]);
        let mut counter = FallbackCounter::default();
        let (r, note) = reflect(&t, &mut Broken, DEFAULT_BAND_BPS, &mut counter);
        assert!(note.is_some());
        assert_eq!(counter.count, 1);
        assert_eq!(r.outcome_label, OutcomeLabel::Loss);
        assert_eq!(r.attribution, "unattributed");
        assert_eq!(r.pattern_validity, PatternValidity::Weakened);
    }

    #[test]
    fn distilled_experience_survives_buffer_round_trip() {
        let t = tau(&[(Horizon::H4, 12.25)]);
        let f = Reflection {
            outcome_label: OutcomeLabel::Win,
            attribution: "Technical: EMA21 cross".into(),
            lesson: "cross held".into(),
            pattern_validity: PatternValidity::Confirmed,
        };
        let embed = normalize(vec![0.3, -0.2, 0.9, 0.1]);
        let e = distill(&t, &f, embed.clone(), RegimeLabel::RiskOn, 1_000);
        assert_eq!(e.horizon_returns.len(), 1);
        assert_eq!(e.pattern, "technical_ema21_cross");
        e.validate().unwrap();
        let mut buf = ReplayBuffer::new(DEFAULT_HALF_LIFE, 4).unwrap();
        buf.insert(e.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        buf.save(&p).unwrap();
        let back = ReplayBuffer::load(&p, DEFAULT_HALF_LIFE, 4).unwrap();
        let got = back.retrieve_top_k(&embed, RegimeLabel::RiskOn, 1, 0.7, 1_000);
        assert_eq!(got, vec![&e]);
    }

    proptest! {
        #[test]
        fn labels_mirror_without_band(x in -1e4f64..1e4) {
            let mirror = |l| match l {
                OutcomeLabel::Win => OutcomeLabel::Loss,
                OutcomeLabel::Loss => OutcomeLabel::Win,
                OutcomeLabel::BreakEven => OutcomeLabel::BreakEven,
            };
            prop_assert_eq!(label_outcome(-x, 0.0), mirror(label_outcome(x, 0.0)));
        }

        #[test]
        fn returns_fall_with_cost(closes in prop::collection::vec(50.0f64..150.0, 700), c1 in 0.0f64..100.0, dc in 0.01f64..100.0) {
            let s = series(&closes);
            let a = horizon_returns(closes[0], 0, &s, c1).unwrap();
            let b = horizon_returns(closes[0], 0, &s, c1 + dc).unwrap();
            for (h, r) in &a {
                prop_assert!(b[h] < *r);
            }
        }

        #[test]
        fn never_reads_past_longest_horizon(tail in prop::collection::vec(1.0f64..1e6, 1..50)) {
            let mut closes = vec![100.0; 96 * 7 + 1];
            let base = horizon_returns(100.0, 0, &series(&closes), 0.0).unwrap();
            closes.extend(tail);
            prop_assert_eq!(horizon_returns(100.0, 0, &series(&closes), 0.0).unwrap(), base);
        }
    }
}

//! Decision and reflection policies: a deterministic rule-based stub and a
//! chat-completion client with schema validation, retries and fallback
//! accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::memory::Experience;
use crate::reflection::{label_outcome, OutcomeLabel, PatternValidity, PostTradeTuple, Reflection, DEFAULT_BAND_BPS};
use crate::strategist::{Bias, DecisionTuple, MarketSnapshot};

pub const DECISION_TEMPLATE: &str = include_str!("../prompts/decision_v1.txt");
pub const REFLECTION_TEMPLATE: &str = include_str!("../prompts/reflection_v1.txt");
pub const DEFAULT_API_KEY_ENV: &str = "AGENTRADE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FallbackReason {
    Parse,
    Transport,
    Timeout,
    Schema,
}

impl FallbackReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FallbackReason::Parse => "PARSE",
            FallbackReason::Transport => "TRANSPORT",
            FallbackReason::Timeout => "TIMEOUT",
            FallbackReason::Schema => "SCHEMA",
        }
    }
}

/// Policy invocations whose output was replaced by a conservative default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCounter {
    pub count: u64,
    pub reasons: BTreeMap<FallbackReason, u64>,
}

impl FallbackCounter {
    pub fn record(&mut self, reason: FallbackReason) {
        self.count += 1;
        *self.reasons.entry(reason).or_default() += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyFailure {
    pub reason: FallbackReason,
    pub detail: String,
}

impl PolicyFailure {
    pub fn new(reason: FallbackReason, detail: impl Into<String>) -> Self {
        Self { reason, detail: detail.into() }
    }
}

impl fmt::Display for PolicyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.reason.as_str(), self.detail)
    }
}

pub trait DecisionPolicy {
    fn decide(&mut self, d: &MarketSnapshot, experiences: &[&Experience]) -> Result<DecisionTuple, PolicyFailure>;
}

pub trait ReflectionPolicy {
    fn reflect(&mut self, tau: &PostTradeTuple) -> Result<Reflection, PolicyFailure>;
}

/// A policy serving both decisions and reflections.
pub trait Policy: DecisionPolicy + ReflectionPolicy {}

impl<T: DecisionPolicy + ReflectionPolicy + ?Sized> Policy for T {}

/// Deterministic rule table standing in for a language model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubPolicy {
    pub band_bps: f64,
}

impl Default for StubPolicy {
    fn default() -> Self {
        Self { band_bps: DEFAULT_BAND_BPS }
    }
}

/// Uptrend rule: LONG when EMA21 is above EMA50 and RSI14 is below 70, with
/// the trigger on a close crossing above EMA21. Confidence rises when a
/// retrieved episode from the same regime was profitable on average.
pub fn stub_policy(d: &MarketSnapshot, experiences: &[&Experience]) -> DecisionTuple {
    let ind = &d.ind;
    if ind.ema21 > ind.ema50 && ind.rsi14 < 70.0 {
        let crossed = d.prev_close <= d.prev_ema21 && d.close() > ind.ema21;
        let remembered = experiences
            .iter()
            .any(|e| e.regime_label == d.regime.label && e.mean_return_bps().is_some_and(|r| r > 0.0));
        let mut rationale = String::from("uptrend: ema21 > ema50 and rsi14 < 70");
        if crossed {
            rationale.push_str("; close crossed above ema21");
        }
        if remembered {
            rationale.push_str("; profitable episode in same regime");
        }
        DecisionTuple {
            bias: Bias::Long,
            confidence: if remembered { 0.75 } else { 0.65 },
            expected_move_bps: 60.0,
            rationale,
            p_long: 0.7,
            trigger_fired: crossed,
        }
    } else {
        DecisionTuple {
            bias: Bias::Flat,
            confidence: 0.3,
            expected_move_bps: 0.0,
            rationale: "no uptrend: ema21 <= ema50 or rsi14 >= 70".into(),
            p_long: 0.3,
            trigger_fired: false,
        }
    }
}

pub fn stub_reflection(tau: &PostTradeTuple, band_bps: f64) -> Reflection {
    let (h, net) = tau.longest().map_or(("none".to_string(), 0.0), |(h, r)| (h.to_string(), r));
    let outcome_label = label_outcome(net, band_bps);
    let pattern_validity = match outcome_label {
        OutcomeLabel::Win => PatternValidity::Confirmed,
        OutcomeLabel::BreakEven => PatternValidity::Weakened,
        OutcomeLabel::Loss => PatternValidity::Invalidated,
    };
    Reflection {
        outcome_label,
        attribution: "technical".into(),
        lesson: format!("{:?} after {h}: {net:.1} bps net of costs", outcome_label),
        pattern_validity,
    }
}

impl DecisionPolicy for StubPolicy {
    fn decide(&mut self, d: &MarketSnapshot, experiences: &[&Experience]) -> Result<DecisionTuple, PolicyFailure> {
        Ok(stub_policy(d, experiences))
    }
}

impl ReflectionPolicy for StubPolicy {
    fn reflect(&mut self, tau: &PostTradeTuple) -> Result<Reflection, PolicyFailure> {
        Ok(stub_reflection(tau, self.band_bps))
    }
}

/// Never takes a position: FLAT with zero confidence at every epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct AbstainPolicy;

impl DecisionPolicy for AbstainPolicy {
    fn decide(&mut self, _: &MarketSnapshot, _: &[&Experience]) -> Result<DecisionTuple, PolicyFailure> {
        Ok(DecisionTuple {
            bias: Bias::Flat,
            confidence: 0.0,
            expected_move_bps: 0.0,
            rationale: "abstain".into(),
            p_long: 0.0,
            trigger_fired: false,
        })
    }
}

impl ReflectionPolicy for AbstainPolicy {
    fn reflect(&mut self, tau: &PostTradeTuple) -> Result<Reflection, PolicyFailure> {
        Ok(stub_reflection(tau, DEFAULT_BAND_BPS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestKind {
    Decision,
    Reflection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRequest {
    pub kind: RequestKind,
    pub rendered_prompt: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl PolicyRequest {
    /// Fields the structured response must carry.
    pub fn schema(&self) -> &'static [&'static str] {
        match self.kind {
            RequestKind::Decision => &["bias", "confidence", "expected_move_bps", "rationale"],
            RequestKind::Reflection => &["outcome_label", "attribution", "lesson", "pattern_validity"],
        }
    }

    pub fn prompt_digest(&self) -> String {
        hex::encode(Sha256::digest(self.rendered_prompt.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout(String),
    Other(String),
}

/// Sends one chat-completion request body and returns the raw response text.
pub trait Transport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value, timeout: Duration) -> Result<String, TransportError>;
}

/// Blocking HTTP transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value, timeout: Duration) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let classify = |e: ureq::Error| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
            other => TransportError::Other(other.to_string()),
        };
        let mut resp = req.send_json(body).map_err(classify)?;
        resp.body_mut().read_to_string().map_err(classify)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(GatewayError::Config(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::Config("model is empty".into()));
        }
        if self.timeout_secs == 0 {
            return Err(GatewayError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }
}

/// Chat-completion client for structured policy outputs.
pub struct RemotePolicy<T: Transport = HttpTransport> {
    pub endpoint: EndpointConfig,
    pub symbol: String,
    transport: T,
    api_key: Option<String>,
    rng: ChaCha8Rng,
}

impl RemotePolicy<HttpTransport> {
    pub fn http(endpoint: EndpointConfig, symbol: impl Into<String>, seed: u64) -> Result<Self, GatewayError> {
        Self::new(endpoint, symbol, HttpTransport, seed)
    }
}

impl<T: Transport> RemotePolicy<T> {
    /// Reads the API key from the configured environment variable. A missing
    /// key is allowed for local endpoints that need none.
    pub fn new(endpoint: EndpointConfig, symbol: impl Into<String>, transport: T, seed: u64) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let api_key = std::env::var(&endpoint.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            warn!(env = %endpoint.api_key_env, "no API key in environment");
        }
        Ok(Self { endpoint, symbol: symbol.into(), transport, api_key, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    fn request(&self, kind: RequestKind, rendered_prompt: String) -> PolicyRequest {
        PolicyRequest {
            kind,
            rendered_prompt,
            timeout: Duration::from_secs(self.endpoint.timeout_secs),
            max_retries: self.endpoint.max_retries,
        }
    }

    /// Send `req`, retrying transport and parse failures with exponential
    /// backoff, and return the first structured object that has every
    /// schema field.
    pub fn complete_structured(&mut self, req: &PolicyRequest) -> Result<Value, PolicyFailure> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.endpoint.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": req.rendered_prompt}],
        });
        debug!(kind = ?req.kind, prompt_sha256 = %req.prompt_digest(), "policy request");
        let mut last = PolicyFailure::new(FallbackReason::Transport, "no attempt made");
        for attempt in 0..=req.max_retries {
            if attempt > 0 {
                let base = self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                let jitter = if base > 0 { self.rng.random_range(0..base) } else { 0 };
                std::thread::sleep(Duration::from_millis(base + jitter));
            }
            let raw = match self.transport.post_json(&url, self.api_key.as_deref(), &body, req.timeout) {
                Ok(raw) => raw,
                Err(TransportError::Timeout(msg)) => {
                    last = PolicyFailure::new(FallbackReason::Timeout, msg);
                    continue;
                }
                Err(TransportError::Other(msg)) => {
                    last = PolicyFailure::new(FallbackReason::Transport, msg);
                    continue;
                }
            };
            let obj = match message_content(&raw).and_then(|c| first_json_object(&c)) {
                Some(obj) => obj,
                None => {
                    last = PolicyFailure::new(FallbackReason::Parse, "no JSON object in response");
                    continue;
                }
            };
            if let Some(missing) = req.schema().iter().find(|f| obj.get(**f).is_none()) {
                return Err(PolicyFailure::new(FallbackReason::Schema, format!("missing field {missing}")));
            }
            return Ok(obj);
        }
        Err(last)
    }
}

/// The assistant text of a chat-completion response, or the body itself
/// when it is not in that format.
fn message_content(raw: &str) -> Option<String> {
    match serde_json::from_str::<Value>(raw) {
        Ok(v) => match v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(s) => Some(s.to_string()),
            None if v.is_object() => Some(raw.to_string()),
            None => None,
        },
        Err(_) => Some(raw.to_string()),
    }
}

/// The first JSON object embedded anywhere in `text`.
pub fn first_json_object(text: &str) -> Option<Value> {
    text.match_indices('{').find_map(|(i, _)| {
        serde_json::Deserializer::from_str(&text[i..])
            .into_iter::<Value>()
            .next()
            .and_then(Result::ok)
            .filter(Value::is_object)
    })
}

/// Decision tuple from a validated response object.
pub fn parse_decision(obj: &Value) -> Result<DecisionTuple, PolicyFailure> {
    let schema = |msg: String| PolicyFailure::new(FallbackReason::Schema, msg);
    let num = |k: &str| obj.get(k).and_then(Value::as_f64).ok_or_else(|| schema(format!("{k} is not a number")));
    let bias = match obj.get("bias").and_then(Value::as_str).map(str::to_ascii_uppercase).as_deref() {
        Some("LONG") => Bias::Long,
        Some("FLAT") => Bias::Flat,
        other => return Err(schema(format!("bias {other:?} is not LONG or FLAT"))),
    };
    let confidence = num("confidence")?;
    let p_long = match obj.get("p_long") {
        None | Some(Value::Null) => confidence,
        Some(_) => num("p_long")?,
    };
    let trigger_fired = match obj.get("trigger_fired") {
        None | Some(Value::Null) => false,
        Some(v) => v.as_bool().ok_or_else(|| schema("trigger_fired is not a boolean".into()))?,
    };
    let tuple = DecisionTuple {
        bias,
        confidence,
        expected_move_bps: num("expected_move_bps")?,
        rationale: obj.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
        p_long,
        trigger_fired,
    };
    tuple.validate().map_err(schema)?;
    Ok(tuple)
}

pub fn parse_reflection(obj: &Value) -> Result<Reflection, PolicyFailure> {
    let r: Reflection = serde_json::from_value(obj.clone())
        .map_err(|e| PolicyFailure::new(FallbackReason::Schema, e.to_string()))?;
    if r.attribution.trim().is_empty() {
        return Err(PolicyFailure::new(FallbackReason::Schema, "empty attribution"));
    }
    Ok(r)
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

pub fn render_decision_prompt(symbol: &str, d: &MarketSnapshot, experiences: &[&Experience]) -> String {
    let evidence = if d.evidence.items.is_empty() {
        "(none)".to_string()
    } else {
        d.evidence
            .items
            .iter()
            .map(|i| match i.sentiment {
                Some(s) => format!("- [{}] {:?} ({s:+.2}): {}", i.ts, i.source, i.text),
                None => format!("- [{}] {:?}: {}", i.ts, i.source, i.text),
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let experiences = if experiences.is_empty() {
        "(none)".to_string()
    } else {
        experiences
            .iter()
            .map(|e| {
                let rets = e.horizon_returns.iter().map(|(h, r)| format!("{h} {r:+.1}")).collect::<Vec<_>>().join(", ");
                format!("- {} regime {} pattern {}: {} bps; lesson: {}", e.id, e.regime_label.as_str(), e.pattern, rets, e.lesson)
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    fill(
        DECISION_TEMPLATE,
        &[
            ("symbol", symbol.to_string()),
            ("as_of", d.t.to_string()),
            ("market_summary", d.evidence.market_summary.clone()),
            ("evidence_count", d.evidence.items.len().to_string()),
            ("aggregate_sentiment", format!("{:+.4}", d.evidence.aggregate_sentiment)),
            ("evidence", evidence),
            ("experiences", experiences),
        ],
    )
}

pub fn render_reflection_prompt(tau: &PostTradeTuple) -> String {
    let rets = tau
        .horizon_returns
        .iter()
        .map(|(h, r)| format!("- {h}: {r:+.2} bps"))
        .collect::<Vec<_>>()
        .join("\n");
    fill(
        REFLECTION_TEMPLATE,
        &[
            ("bias", tau.decision.bias.to_string()),
            ("confidence", format!("{:.3}", tau.decision.confidence)),
            ("expected_move_bps", format!("{:.1}", tau.decision.expected_move_bps)),
            ("rationale", tau.decision.rationale.clone()),
            ("entry_price", tau.entry_price.to_string()),
            ("entry_t", tau.entry_t.to_string()),
            ("cost_bps", format!("{:.2}", tau.cost_bps)),
            ("horizon_returns", rets),
        ],
    )
}

impl<T: Transport> DecisionPolicy for RemotePolicy<T> {
    fn decide(&mut self, d: &MarketSnapshot, experiences: &[&Experience]) -> Result<DecisionTuple, PolicyFailure> {
        let req = self.request(RequestKind::Decision, render_decision_prompt(&self.symbol, d, experiences));
        parse_decision(&self.complete_structured(&req)?)
    }
}

impl<T: Transport> ReflectionPolicy for RemotePolicy<T> {
    fn reflect(&mut self, tau: &PostTradeTuple) -> Result<Reflection, PolicyFailure> {
        let req = self.request(RequestKind::Reflection, render_reflection_prompt(tau));
        parse_reflection(&self.complete_structured(&req)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Canned {
        replies: Vec<Result<String, TransportError>>,
        calls: Cell<usize>,
    }

    impl Canned {
        fn new(replies: Vec<Result<String, TransportError>>) -> Self {
            Self { replies, calls: Cell::new(0) }
        }
    }

    impl Transport for Canned {
        fn post_json(&self, _: &str, _: Option<&str>, body: &Value, _: Duration) -> Result<String, TransportError> {
            assert_eq!(body["temperature"], 0);
            let i = self.calls.get();
            self.calls.set(i + 1);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn endpoint(max_retries: u32) -> EndpointConfig {
        EndpointConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "test-model".into(),
            api_key_env: "AGENTRADE_TEST_UNSET_KEY".into(),
            max_retries,
            backoff_ms: 0,
            ..EndpointConfig::default()
        }
    }

    fn chat(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    fn request() -> PolicyRequest {
        PolicyRequest { kind: RequestKind::Decision, rendered_prompt: "p".into(), timeout: Duration::from_secs(1), max_retries: 0 }
    }

    #[test]
    fn valid_response_parses() {
        let body = chat(r#"Sure. {"bias":"LONG","confidence":0.7,"expected_move_bps":45,"rationale":"trend"} done"#);
        let mut p = RemotePolicy::new(endpoint(0), "BTCUSDT", Canned::new(vec![Ok(body)]), 1).unwrap();
        let obj = p.complete_structured(&request()).unwrap();
        let t = parse_decision(&obj).unwrap();
        assert_eq!(t.bias, Bias::Long);
        assert_eq!(t.confidence, 0.7);
        assert_eq!(t.p_long, 0.7);
        assert!(!t.trigger_fired);
    }

    #[test]
    fn out_of_range_confidence_is_schema_failure() {
        let obj = json!({"bias":"LONG","confidence":1.3,"expected_move_bps":45,"rationale":"x"});
        assert_eq!(parse_decision(&obj).unwrap_err().reason, FallbackReason::Schema);
    }

    #[test]
    fn transport_failure_retries_then_falls_back() {
        let canned = Canned::new(vec![Err(TransportError::Other("refused".into()))]);
        let mut p = RemotePolicy::new(endpoint(2), "BTCUSDT", canned, 1).unwrap();
        let mut req = request();
        req.max_retries = 2;
        let err = p.complete_structured(&req).unwrap_err();
        assert_eq!(err.reason, FallbackReason::Transport);
        assert_eq!(p.transport.calls.get(), 3);
    }

    #[test]
    fn parse_failure_recovers_on_retry() {
        let canned = Canned::new(vec![
            Ok(chat("I cannot answer that")),
            Ok(chat(r#"{"bias":"FLAT","confidence":0.2,"expected_move_bps":0,"rationale":"r"}"#)),
        ]);
        let mut p = RemotePolicy::new(endpoint(1), "BTCUSDT", canned, 1).unwrap();
        let mut req = request();
        req.max_retries = 1;
        assert!(p.complete_structured(&req).is_ok());
    }

    #[test]
    fn missing_field_is_schema_failure_without_retry() {
        let canned = Canned::new(vec![Ok(chat(r#"{"bias":"FLAT"}"#))]);
        let mut p = RemotePolicy::new(endpoint(3), "BTCUSDT", canned, 1).unwrap();
        let mut req = request();
        req.max_retries = 3;
        assert_eq!(p.complete_structured(&req).unwrap_err().reason, FallbackReason::Schema);
        assert_eq!(p.transport.calls.get(), 1);
    }

    #[test]
    fn unreachable_endpoint_is_transport_failure() {
        let mut cfg = endpoint(2);
        cfg.timeout_secs = 2;
        let mut p = RemotePolicy::http(cfg, "BTCUSDT", 1).unwrap();
        let mut req = request();
        req.max_retries = 2;
        let err = p.complete_structured(&req).unwrap_err();
        assert!(matches!(err.reason, FallbackReason::Transport | FallbackReason::Timeout));
    }

    #[test]
    fn misconfigured_endpoint_rejected() {
        let mut cfg = endpoint(0);
        cfg.base_url = "ftp://x".into();
        assert!(RemotePolicy::http(cfg, "X", 0).is_err());
        let mut cfg = endpoint(0);
        cfg.model.clear();
        assert!(RemotePolicy::http(cfg, "X", 0).is_err());
    }

    #[test]
    fn first_object_extraction() {
        assert_eq!(first_json_object("x {\"a\":{\"b\":1}} {\"c\":2}").unwrap(), json!({"a":{"b":1}}));
        assert_eq!(first_json_object("{broken {\"a\":1}").unwrap(), json!({"a":1}));
        assert!(first_json_object("none here").is_none());
    }

    #[test]
    fn reflection_parse() {
        let ok = json!({"outcome_label":"WIN","attribution":"technical","lesson":"l","pattern_validity":"CONFIRMED"});
        assert!(parse_reflection(&ok).is_ok());
        let bad = json!({"outcome_label":"GREAT","attribution":"technical","lesson":"l","pattern_validity":"CONFIRMED"});
        assert_eq!(parse_reflection(&bad).unwrap_err().reason, FallbackReason::Schema);
    }

    #[test]
    fn counter_tracks_reasons() {
        let mut c = FallbackCounter::default();
        c.record(FallbackReason::Parse);
        c.record(FallbackReason::Parse);
        c.record(FallbackReason::Timeout);
        assert_eq!(c.count, 3);
        assert_eq!(c.reasons.values().sum::<u64>(), c.count);
    }

    #[test]
    fn templates_have_no_unfilled_placeholders() {
        let tau = PostTradeTuple {
            snapshot_digest: "d".into(),
            decision: DecisionTuple::fallback(),
            entry_price: 1.0,
            entry_t: 0,
            exit_price: None,
            exit_t: None,
            cost_bps: 20.0,
            horizon_returns: BTreeMap::new(),
        };
        assert!(!render_reflection_prompt(&tau).contains("{{"));
    }
}

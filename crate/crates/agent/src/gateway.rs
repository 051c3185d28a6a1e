//! Chat-completion gateway.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] with the shared retry policy, a
//! global in-flight limit, token accounting and optional JSONL tracing.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_output_tokens: 4096,
            seed: None,
        }
    }
}

/// Identifies one conversation. `subject` is usually a question id and `run`
/// distinguishes repeated episodes on it (samples, validation passes).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConversationKey {
    pub subject: String,
    pub run: String,
}

impl ConversationKey {
    pub fn new(subject: impl Into<String>, run: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            run: run.into(),
        }
    }
}

impl fmt::Display for ConversationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.subject, self.run)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("conversation has no messages")]
    EmptyConversation,
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("context too long: {0}")]
    ContextTooLong(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::EndpointUnavailable(_) | GatewayError::RateLimited(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when counts come from the character heuristic.
    pub estimated: bool,
}

impl Usage {
    pub fn estimate(messages: &[ChatMessage], response: &str) -> Self {
        let prompt: usize = messages.iter().map(|m| m.content.chars().count()).sum();
        Self {
            prompt_tokens: prompt.div_ceil(4) as u64,
            completion_tokens: response.chars().count().div_ceil(4) as u64,
            estimated: true,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

pub struct ChatRequest<'a> {
    pub conversation: &'a ConversationKey,
    pub messages: &'a [ChatMessage],
    pub decoding: &'a DecodingConfig,
}

pub trait ChatBackend: Send + Sync {
    fn model(&self) -> &str;

    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, GatewayError>;

    /// Scripted backends are deterministic regardless of temperature.
    fn is_scripted(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            jitter: false,
            ..Self::default()
        }
    }

    /// Delay before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16));
        let capped = exp.min(self.max_delay);
        if self.jitter && !capped.is_zero() {
            capped.mul_f64(rand::rng().random_range(0.5..1.5))
        } else {
            capped
        }
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated_calls: u64,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    ts: String,
    model: &'a str,
    conversation: String,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    usage: Option<Usage>,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    in_flight: InFlight,
    trace: Option<Mutex<BufWriter<File>>>,
    totals: Mutex<UsageTotals>,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_box(Box::new(backend))
    }

    pub fn from_box(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            in_flight: InFlight {
                limit: DEFAULT_MAX_IN_FLIGHT,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            trace: None,
            totals: Mutex::new(UsageTotals::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight.limit = limit.max(1);
        self
    }

    /// Appends one JSONL record per call to `path`.
    pub fn with_trace(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.trace = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn is_scripted(&self) -> bool {
        self.backend.is_scripted()
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }

    pub fn totals(&self) -> UsageTotals {
        *self.totals.lock().expect("totals lock")
    }

    /// One assistant completion, retrying transient failures.
    pub fn chat(
        &self,
        conversation: &ConversationKey,
        messages: &[ChatMessage],
        decoding: &DecodingConfig,
    ) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyConversation);
        }
        let request = ChatRequest {
            conversation,
            messages,
            decoding,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.complete(&request)
            };
            match result {
                Ok(completion) => {
                    let usage = completion
                        .usage
                        .unwrap_or_else(|| Usage::estimate(messages, &completion.text));
                    self.account(usage);
                    self.write_trace(conversation, messages, Some(&completion.text), None, Some(usage));
                    return Ok(completion.text);
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    warn!("{conversation}: attempt {attempt} failed: {e}");
                    self.write_trace(conversation, messages, None, Some(e.to_string()), None);
                    let delay = self.retry.delay(attempt);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
                Err(e) => {
                    self.write_trace(conversation, messages, None, Some(e.to_string()), None);
                    return Err(e);
                }
            }
        }
    }

    fn account(&self, usage: Usage) {
        let mut t = self.totals.lock().expect("totals lock");
        t.calls += 1;
        t.prompt_tokens += usage.prompt_tokens;
        t.completion_tokens += usage.completion_tokens;
        t.estimated_calls += u64::from(usage.estimated);
    }

    fn write_trace(
        &self,
        conversation: &ConversationKey,
        messages: &[ChatMessage],
        response: Option<&str>,
        error: Option<String>,
        usage: Option<Usage>,
    ) {
        let Some(trace) = &self.trace else {
            return;
        };
        let record = TraceRecord {
            ts: chrono::Utc::now().to_rfc3339(),
            model: self.backend.model(),
            conversation: conversation.to_string(),
            messages,
            response,
            error,
            usage,
        };
        let mut w = trace.lock().expect("trace lock");
        let line = serde_json::to_string(&record).expect("trace record serializes");
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            warn!("failed to write trace record: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;

    struct FailN {
        remaining: AtomicUsize,
        error: GatewayError,
        calls: Arc<AtomicUsize>,
    }

    impl ChatBackend for FailN {
        fn model(&self) -> &str {
            "fail-n"
        }

        fn complete(&self, _request: &ChatRequest<'_>) -> Result<Completion, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .remaining
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(self.error.clone());
            }
            Ok(Completion {
                text: "ok".into(),
                usage: None,
            })
        }
    }

    fn gateway(failures: usize, error: GatewayError) -> (Gateway, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let g = Gateway::new(FailN {
            remaining: AtomicUsize::new(failures),
            error,
            calls: calls.clone(),
        })
        .with_retry(RetryPolicy::immediate());
        (g, calls)
    }

    fn key() -> ConversationKey {
        ConversationKey::new("q", "0")
    }

    #[test]
    fn retries_transient_errors_up_to_three_attempts() {
        let (g, calls) = gateway(2, GatewayError::RateLimited("slow down".into()));
        assert_eq!(g.chat(&key(), &[ChatMessage::user("hi")], &DecodingConfig::default()).unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let (g, calls) = gateway(3, GatewayError::EndpointUnavailable("down".into()));
        assert!(matches!(
            g.chat(&key(), &[ChatMessage::user("hi")], &DecodingConfig::default()),
            Err(GatewayError::EndpointUnavailable(_))
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn context_errors_are_not_retried() {
        let (g, calls) = gateway(1, GatewayError::ContextTooLong("too long".into()));
        assert!(matches!(
            g.chat(&key(), &[ChatMessage::user("hi")], &DecodingConfig::default()),
            Err(GatewayError::ContextTooLong(_))
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_conversation_is_rejected() {
        let (g, calls) = gateway(0, GatewayError::BadResponse(String::new()));
        assert_eq!(
            g.chat(&key(), &[], &DecodingConfig::default()),
            Err(GatewayError::EmptyConversation)
        );
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn usage_falls_back_to_char_estimate() {
        let (g, _) = gateway(0, GatewayError::BadResponse(String::new()));
        g.chat(&key(), &[ChatMessage::user("12345678")], &DecodingConfig::default()).unwrap();
        let t = g.totals();
        assert_eq!((t.calls, t.prompt_tokens, t.completion_tokens, t.estimated_calls), (1, 2, 1, 1));
    }

    #[test]
    fn backoff_is_capped_and_exponential() {
        let p = RetryPolicy {
            jitter: false,
            ..RetryPolicy::default()
        };
        assert_eq!(p.delay(1), Duration::from_secs(1));
        assert_eq!(p.delay(2), Duration::from_secs(2));
        assert_eq!(p.delay(3), Duration::from_secs(4));
        assert_eq!(p.delay(10), Duration::from_secs(30));
        let j = RetryPolicy::default().delay(1);
        assert!(j >= Duration::from_millis(500) && j < Duration::from_millis(1500));
    }

    #[test]
    fn trace_file_gets_one_line_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let (g, _) = gateway(1, GatewayError::EndpointUnavailable("x".into()));
        let g = g.with_trace(&path).unwrap();
        g.chat(&key(), &[ChatMessage::user("hi")], &DecodingConfig::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0]["error"].is_string());
        assert_eq!(lines[1]["response"], "ok");
        assert_eq!(lines[1]["model"], "fail-n");
        assert!(lines[1]["ts"].is_string());
    }

    struct Slow {
        active: AtomicUsize,
        peak: Arc<AtomicUsize>,
    }

    impl ChatBackend for Slow {
        fn model(&self) -> &str {
            "slow"
        }
        fn complete(&self, _request: &ChatRequest<'_>) -> Result<Completion, GatewayError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion {
                text: "done".into(),
                usage: None,
            })
        }
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        let peak = Arc::new(AtomicUsize::new(0));
        let g = Gateway::new(Slow {
            active: AtomicUsize::new(0),
            peak: peak.clone(),
        })
        .with_max_in_flight(2);
        thread::scope(|s| {
            for i in 0..8 {
                let g = &g;
                s.spawn(move || {
                    g.chat(&ConversationKey::new("q", i.to_string()), &[ChatMessage::user("x")], &DecodingConfig::default())
                        .unwrap();
                });
            }
        });
        assert_eq!(g.totals().calls, 8);
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}

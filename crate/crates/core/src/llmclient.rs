//! Chat-completion client with an on-disk response cache, retries, rate
//! limiting, a scripted mock, and parsers for structured model output.
//!
//! # Wire format of the live adapter
//!
//! Request body, `POST {base_url}{path}`:
//!
//! | field         | type                                   |
//! |---------------|----------------------------------------|
//! | `model`       | string                                 |
//! | `messages`    | array of `{"role", "content"}`; role is `"system"` or `"user"` (our `human`) |
//! | `temperature` | number                                 |
//! | `max_tokens`  | integer                                |
//!
//! The auth header (default `Authorization: Bearer <key>`) is sent when the
//! configured environment variable is set.
//!
//! Response body fields read:
//!
//! | field                          | use                       |
//! |--------------------------------|---------------------------|
//! | `choices[0].message.content`   | `ChatResponse::text`      |
//! | `choices[0].finish_reason`     | `finish_reason`           |
//! | `usage.prompt_tokens`          | `usage.prompt_tokens`     |
//! | `usage.completion_tokens`      | `usage.completion_tokens` |
//! | `id`, `model`                  | `provider` metadata       |
//!
//! Status 429 and 5xx are retried with exponential backoff; other non-2xx
//! statuses fail immediately with `ProviderError`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::LlmError;
use crate::metrics::{NerPrediction, OUTSIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn human(content: impl Into<String>) -> Self {
        Message { role: Role::Human, content: content.into() }
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest { model: model.into(), messages, temperature: 0.0, max_tokens: DEFAULT_MAX_TOKENS }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// All message contents joined, for matching in mocks.
    pub fn full_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: Option<String>,
    pub usage: Usage,
    pub provider: serde_json::Value,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    /// SHA-256 of the request's JSON serialization (fixed field order).
    pub fn of(req: &ChatRequest) -> Self {
        let bytes = serde_json::to_vec(req).expect("request serializes");
        CacheKey(hex::encode(Sha256::digest(&bytes)))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub request: ChatRequest,
    pub response: ChatResponse,
    /// Seconds since the Unix epoch when the entry was written.
    pub timestamp: u64,
}

/// One JSON file per request key.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into(), locks: Mutex::new(HashMap::new()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn lock_for(&self, key: &CacheKey) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(key.clone()).or_default().clone()
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, LlmError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| LlmError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    pub fn put(&self, req: &ChatRequest, resp: &ChatResponse) -> Result<CacheEntry, LlmError> {
        let key = CacheKey::of(req);
        let lock = self.lock_for(&key);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let entry = CacheEntry {
            key: key.clone(),
            request: req.clone(),
            response: resp.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(|e| LlmError::Cache(e.to_string()))?;
        let path = self.path_for(&key);
        crate::lemma::write_atomic(&path, &bytes).map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|d| {
                d.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Something that answers chat requests: a live provider or a mock.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> String;
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpConfig {
    pub base_url: String,
    pub path: String,
    pub api_key_env: String,
    pub auth_header: String,
    /// Prefix put before the key in the auth header value.
    pub auth_prefix: String,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com".into(),
            path: "/v1/chat/completions".into(),
            api_key_env: "CLNLU_API_KEY".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.config.path)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    id: Option<String>,
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.url())
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = WireRequest {
            model: &req.model,
            messages: req
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        Role::System => "system",
                        Role::Human => "user",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut builder = self.client.post(self.url()).json(&body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            builder = builder.header(self.config.auth_header.as_str(), format!("{}{key}", self.config.auth_prefix));
        }
        let resp = builder.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::ProviderError { status, body: excerpt(&text) });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| LlmError::ProviderError { status, body: format!("unparseable body ({e}): {}", excerpt(&text)) })?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::ProviderError { status, body: "no choices".into() })?;
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason,
            usage: wire.usage.unwrap_or_default(),
            provider: serde_json::json!({ "id": wire.id, "model": wire.model }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Every string must occur in the request text for the rule to fire.
    pub all_of: Vec<String>,
    pub reply: String,
}

/// Mock script file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockScript {
    Queue { queue: Vec<String> },
    Rules { rules: Vec<MockRule>, #[serde(default)] default: Option<String> },
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))
    }
}

type Responder = Arc<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

enum MockBehavior {
    Queue(VecDeque<String>),
    Rules(Vec<MockRule>, Option<String>),
    Func(Responder),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCall {
    pub request: ChatRequest,
    pub response: String,
}

/// Scripted backend. Every call is recorded in the trace.
pub struct MockLlm {
    behavior: Mutex<MockBehavior>,
    trace: Mutex<Vec<MockCall>>,
}

impl MockLlm {
    pub fn queue<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with(MockBehavior::Queue(responses.into_iter().map(Into::into).collect()))
    }

    pub fn rules(rules: Vec<MockRule>, default: Option<String>) -> Self {
        Self::with(MockBehavior::Rules(rules, default))
    }

    /// Replies with `f(request)`; `None` means the mock has nothing to say
    /// and the call fails with `MockExhausted`.
    pub fn func(f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        Self::with(MockBehavior::Func(Arc::new(f)))
    }

    pub fn from_script(script: MockScript) -> Self {
        match script {
            MockScript::Queue { queue } => Self::queue(queue),
            MockScript::Rules { rules, default } => Self::rules(rules, default),
        }
    }

    fn with(b: MockBehavior) -> Self {
        MockLlm { behavior: Mutex::new(b), trace: Mutex::new(Vec::new()) }
    }

    pub fn trace(&self) -> Vec<MockCall> {
        self.trace.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn calls(&self) -> usize {
        self.trace.lock().unwrap_or_else(|p| p.into_inner()).len()
    }
}

impl ChatBackend for MockLlm {
    fn name(&self) -> String {
        "mock".into()
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut trace = self.trace.lock().unwrap_or_else(|p| p.into_inner());
        let reply = {
            let mut behavior = self.behavior.lock().unwrap_or_else(|p| p.into_inner());
            match &mut *behavior {
                MockBehavior::Queue(q) => q.pop_front(),
                MockBehavior::Rules(rules, default) => {
                    let text = req.full_text();
                    rules
                        .iter()
                        .find(|r| r.all_of.iter().all(|s| text.contains(s.as_str())))
                        .map(|r| r.reply.clone())
                        .or_else(|| default.clone())
                }
                MockBehavior::Func(f) => f(req),
            }
        };
        let reply = reply.ok_or(LlmError::MockExhausted(trace.len()))?;
        trace.push(MockCall { request: req.clone(), response: reply.clone() });
        Ok(ChatResponse {
            text: reply,
            finish_reason: Some("stop".into()),
            usage: Usage::default(),
            provider: serde_json::json!({ "mock": true }),
        })
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).send(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16)).min(self.max_delay)
    }
}

/// Token bucket allowing `per_minute` requests per minute with bursts up
/// to the same size.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(n: u32) -> Self {
        let n = f64::from(n.max(1));
        RateLimiter { per_minute: n, state: Mutex::new((n, Instant::now())) }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_minute / 60.0;
                st.0 = (st.0 + refill).min(self.per_minute);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) * 60.0 / self.per_minute)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding in-flight backend calls.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|p| p.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub enum ClientMode {
    Live(Box<dyn ChatBackend>),
    ReplayOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub struct LlmClient {
    mode: ClientMode,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    in_flight: Semaphore,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
    retries: AtomicU64,
}

impl LlmClient {
    pub fn new(mode: ClientMode, cache: Option<ResponseCache>) -> Self {
        LlmClient {
            mode,
            cache,
            retry: RetryPolicy::default(),
            limiter: None,
            in_flight: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
            cache_hits: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    pub fn live(backend: impl ChatBackend + 'static, cache: Option<ResponseCache>) -> Self {
        Self::new(ClientMode::Live(Box::new(backend)), cache)
    }

    pub fn replay_only(cache: ResponseCache) -> Self {
        Self::new(ClientMode::ReplayOnly, Some(cache))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(per_minute));
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    pub fn backend_name(&self) -> String {
        match &self.mode {
            ClientMode::Live(b) => b.name(),
            ClientMode::ReplayOnly => "replay-only".into(),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let key = CacheKey::of(req);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(entry.response);
            }
        }
        let backend = match &self.mode {
            ClientMode::Live(b) => b,
            ClientMode::ReplayOnly => return Err(LlmError::CacheMiss(key.0)),
        };
        let resp = self.call_with_retries(backend.as_ref(), req)?;
        if let Some(cache) = &self.cache {
            cache.put(req, &resp)?;
        }
        Ok(resp)
    }

    fn call_with_retries(&self, backend: &dyn ChatBackend, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                if let Some(l) = &self.limiter {
                    l.acquire();
                }
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                backend.send(req)
            };
            let err = match result {
                Ok(r) => return Ok(r),
                Err(e) => e,
            };
            let retryable = match &err {
                LlmError::Transport(_) => true,
                LlmError::ProviderError { status, .. } => *status == 429 || *status >= 500,
                _ => false,
            };
            if !retryable {
                return Err(err);
            }
            if attempt >= self.retry.max_retries {
                return Err(match err {
                    LlmError::ProviderError { status: 429, .. } => LlmError::RateLimited { attempts: attempt + 1 },
                    other => other,
                });
            }
            log::warn!("llm call failed ({err}), retry {} of {}", attempt + 1, self.retry.max_retries);
            std::thread::sleep(self.retry.delay(attempt));
            self.retries.fetch_add(1, Ordering::Relaxed);
            attempt += 1;
        }
    }
}

const QUOTES: &[char] = &['\'', '"', '‘', '’', '“', '”', '`', '«', '»'];

fn ascii_digits(raw: &str) -> String {
    raw.chars()
        .map(|c| match c {
            '\u{0966}'..='\u{096F}' => char::from(b'0' + (c as u32 - 0x0966) as u8),
            _ => c,
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedNer {
    pub prediction: NerPrediction,
    pub parse_failed: bool,
}

fn first_brace_block(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    for (i, c) in raw[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start + 1..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Reads a quoted string starting at `chars[i]` (an opening quote). The
/// closing quote is the first quote character followed by a delimiter, so
/// apostrophes inside words survive.
fn read_quoted(chars: &[char], i: usize) -> Option<(String, usize)> {
    let mut j = i + 1;
    while j < chars.len() {
        if QUOTES.contains(&chars[j]) {
            let mut k = j + 1;
            while k < chars.len() && chars[k].is_whitespace() {
                k += 1;
            }
            if k == chars.len() || matches!(chars[k], ',' | ']' | ':' | '}' | ')') {
                return Some((chars[i + 1..j].iter().collect(), j + 1));
            }
        }
        j += 1;
    }
    None
}

fn skip_ws(chars: &[char], mut i: usize) -> usize {
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    i
}

/// Parses `{'B-LOC': ['x', 'y'], ...}` out of free model output.
pub fn parse_tagged_dict(raw: &str) -> ParsedNer {
    let Some(block) = first_brace_block(raw) else {
        return ParsedNer { prediction: NerPrediction::default(), parse_failed: true };
    };
    // tolerate an echoed `{{ ... }}`
    let mut block = block.trim();
    while let Some(inner) = block.strip_prefix('{').and_then(|b| b.strip_suffix('}')) {
        block = inner.trim();
    }
    let chars: Vec<char> = block.chars().collect();
    let mut entries: Vec<(String, Vec<String>)> = Vec::new();
    let mut i = 0;
    let mut structured = chars.iter().all(|c| c.is_whitespace());
    while i < chars.len() {
        if !QUOTES.contains(&chars[i]) {
            i += 1;
            continue;
        }
        let Some((key, next)) = read_quoted(&chars, i) else { break };
        let mut j = skip_ws(&chars, next);
        if j >= chars.len() || chars[j] != ':' {
            i = next;
            continue;
        }
        j = skip_ws(&chars, j + 1);
        let mut words = Vec::new();
        if j < chars.len() && chars[j] == '[' {
            j += 1;
            loop {
                j = skip_ws(&chars, j);
                if j >= chars.len() {
                    break;
                }
                match chars[j] {
                    ']' => {
                        j += 1;
                        break;
                    }
                    ',' => j += 1,
                    c if QUOTES.contains(&c) => match read_quoted(&chars, j) {
                        Some((w, n)) => {
                            words.push(w.trim().to_string());
                            j = n;
                        }
                        None => {
                            j = chars.len();
                        }
                    },
                    _ => j += 1,
                }
            }
        } else if j < chars.len() && QUOTES.contains(&chars[j]) {
            if let Some((w, n)) = read_quoted(&chars, j) {
                words.push(w.trim().to_string());
                j = n;
            }
        }
        structured = true;
        let key = key.trim().to_string();
        words.retain(|w| !w.is_empty());
        if key != OUTSIDE && !key.is_empty() {
            match entries.iter_mut().find(|(k, _)| *k == key) {
                Some((_, ws)) => ws.extend(words),
                None => entries.push((key, words)),
            }
        }
        i = j;
    }
    ParsedNer { prediction: NerPrediction::new(entries), parse_failed: !structured }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedScores {
    pub items: Vec<(String, f64)>,
    pub parse_failed: bool,
}

fn scored_pair_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"[(\[]\s*[`'"‘’“”«»]([^`'"‘’“”«»]+?)[`'"‘’“”«»]\s*[,:]\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+))\s*[)\]]"#)
            .expect("valid regex")
    })
}

/// Extracts `('item', score)` pairs in order of first appearance.
pub fn parse_scored_list(raw: &str) -> ParsedScores {
    let text = ascii_digits(raw);
    let mut items: Vec<(String, f64)> = Vec::new();
    for cap in scored_pair_re().captures_iter(&text) {
        let item = cap[1].trim().to_string();
        let Ok(score) = cap[2].parse::<f64>() else { continue };
        let score = score.clamp(0.0, 1.0);
        if item.is_empty() {
            continue;
        }
        match items.iter_mut().find(|(i, _)| *i == item) {
            Some((_, s)) => *s = s.max(score),
            None => items.push((item, score)),
        }
    }
    let parse_failed = items.is_empty();
    ParsedScores { items, parse_failed }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedBinary {
    pub value: u8,
    pub parse_failed: bool,
}

/// First standalone 0 or 1; anything else reads as 0 with the flag set.
pub fn parse_binary(raw: &str) -> ParsedBinary {
    let chars: Vec<char> = ascii_digits(raw).chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c != '0' && c != '1' {
            continue;
        }
        let prev_ok = i == 0 || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '.');
        let next_ok = match chars.get(i + 1) {
            None => true,
            Some('.') => !chars.get(i + 2).is_some_and(|d| d.is_ascii_digit()),
            Some(&n) => !n.is_alphanumeric(),
        };
        if prev_ok && next_ok {
            return ParsedBinary { value: (c == '1') as u8, parse_failed: false };
        }
    }
    ParsedBinary { value: 0, parse_failed: true }
}

//! Uniform client for chat-completion backends.
//!
//! A [`Gateway`] routes each [`CompletionRequest`] to the backend configured
//! for its [`RoleTag`], consults the content-addressed [`ResponseCache`]
//! first, bounds in-flight requests per backend and retries transient
//! failures with exponential backoff.

mod cache;
pub mod http;
pub mod mock;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use cache::{CacheKey, ResponseCache};
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockBehavior, MockStats};

use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    ItemMllm,
    PreferenceLlm,
    RecommenderMllm,
}

impl RoleTag {
    pub const ALL: [RoleTag; 3] = [RoleTag::ItemMllm, RoleTag::PreferenceLlm, RoleTag::RecommenderMllm];

    pub fn accepts_images(self) -> bool {
        !matches!(self, RoleTag::PreferenceLlm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::ItemMllm => "item_mllm",
            RoleTag::PreferenceLlm => "preference_llm",
            RoleTag::RecommenderMllm => "recommender_mllm",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::System, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message { speaker: Speaker::Assistant, text: text.into() }
    }
}

/// Validated image bytes plus their content hash.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    bytes: Arc<[u8]>,
    content_hash: String,
    mime: &'static str,
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("len", &self.bytes.len())
            .field("content_hash", &self.content_hash)
            .field("mime", &self.mime)
            .finish()
    }
}

impl ImagePayload {
    /// Decodes the bytes to make sure they are a readable image.
    pub fn from_bytes(item_id: &str, bytes: Vec<u8>) -> Result<Self> {
        let image_err = |message: String| Error::Image { item_id: item_id.to_string(), message };
        let format = image::guess_format(&bytes).map_err(|e| image_err(e.to_string()))?;
        image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(e.to_string()))?;
        Ok(ImagePayload {
            content_hash: sha256_hex(&bytes),
            mime: format.to_mime_type(),
            bytes: bytes.into(),
        })
    }

    /// Reads a local path or fetches an `http(s)` URL.
    pub async fn load(item_id: &str, image_ref: &str) -> Result<Self> {
        let image_err = |message: String| Error::Image { item_id: item_id.to_string(), message };
        let bytes = if image_ref.starts_with("http://") || image_ref.starts_with("https://") {
            let response = reqwest::get(image_ref)
                .await
                .and_then(|r| r.error_for_status())
                .map_err(|e| image_err(format!("fetching {image_ref}: {e}")))?;
            response
                .bytes()
                .await
                .map_err(|e| image_err(format!("fetching {image_ref}: {e}")))?
                .to_vec()
        } else {
            tokio::fs::read(image_ref)
                .await
                .map_err(|e| image_err(format!("reading {image_ref}: {e}")))?
        };
        ImagePayload::from_bytes(item_id, bytes)
    }

    /// True when the reference is a URL or an existing local file.
    pub fn reference_exists(image_ref: &str) -> bool {
        image_ref.starts_with("http://")
            || image_ref.starts_with("https://")
            || Path::new(image_ref).is_file()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn mime(&self) -> &'static str {
        self.mime
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.mime,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionOptions {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs: u32,
    pub teacher_forced_completion: Option<String>,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        CompletionOptions {
            max_tokens: 512,
            temperature: 0.0,
            top_logprobs: 0,
            teacher_forced_completion: None,
        }
    }
}

/// Who a request is about. Never sent on the wire and not part of the cache
/// key; used for logging and by label-aware mock backends.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub user_id: Option<String>,
    pub item_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub role: RoleTag,
    pub messages: Vec<Message>,
    pub images: Vec<ImagePayload>,
    pub options: CompletionOptions,
    pub subject: Subject,
}

impl CompletionRequest {
    pub fn new(role: RoleTag, messages: Vec<Message>) -> Self {
        CompletionRequest {
            role,
            messages,
            images: Vec::new(),
            options: CompletionOptions::default(),
            subject: Subject::default(),
        }
    }

    pub fn with_image(mut self, image: ImagePayload) -> Self {
        self.images.push(image);
        self
    }

    pub fn with_options(mut self, options: CompletionOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_subject(mut self, user_id: Option<&str>, item_id: Option<&str>) -> Self {
        self.subject = Subject {
            user_id: user_id.map(str::to_string),
            item_id: item_id.map(str::to_string),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.max_tokens < 1 {
            return Err(Error::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.options.temperature >= 0.0 && self.options.temperature.is_finite()) {
            return Err(Error::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.options.temperature
            )));
        }
        if !self.images.is_empty() && !self.role.accepts_images() {
            return Err(Error::InvalidRequest(format!(
                "images are not permitted for role {}",
                self.role
            )));
        }
        if self.messages.is_empty() {
            return Err(Error::InvalidRequest("request has no messages".into()));
        }
        if let Some(forced) = &self.options.teacher_forced_completion {
            if forced.trim().is_empty() {
                return Err(Error::InvalidRequest("teacher-forced completion is empty".into()));
            }
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.speaker == Speaker::User)
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }

    /// Canonical encoding of everything a backend sees: messages, image
    /// content hashes and options.
    pub(crate) fn canonical_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Canonical<'a> {
            messages: &'a [Message],
            images: Vec<&'a str>,
            options: &'a CompletionOptions,
        }
        serde_json::to_vec(&Canonical {
            messages: &self.messages,
            images: self.images.iter().map(|i| i.content_hash()).collect(),
            options: &self.options,
        })
        .expect("request serializes")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// Top-K log-probabilities of the first generated position.
    #[serde(default)]
    pub first_token_logprobs: BTreeMap<String, f64>,
    /// Per-token log-probabilities of a teacher-forced completion.
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default, skip_serializing)]
    pub cache_hit: bool,
}

impl CompletionResult {
    pub fn text(text: impl Into<String>) -> Self {
        CompletionResult {
            text: text.into(),
            first_token_logprobs: BTreeMap::new(),
            token_logprobs: None,
            usage: Usage::default(),
            cache_hit: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub logprobs: bool,
    pub teacher_forcing: bool,
    pub images: bool,
}

/// Failure reported by a backend. Transient errors are retried.
#[derive(Debug)]
pub enum BackendError {
    Transient(String),
    Fatal(Error),
}

impl From<Error> for BackendError {
    fn from(e: Error) -> Self {
        BackendError::Fatal(e)
    }
}

#[async_trait]
pub trait Backend: Send + Sync + fmt::Debug {
    /// Stable identifier used in cache paths.
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn capabilities(&self) -> Capabilities;

    /// Extra cache-key material for backends whose answers depend on
    /// something besides the wire request.
    fn cache_salt(&self, _request: &CompletionRequest) -> Option<String> {
        None
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Default)]
struct GatewayStats {
    backend_calls: [AtomicU64; 3],
    cache_hits: [AtomicU64; 3],
    retries: AtomicU64,
}

/// Point-in-time copy of the gateway counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub backend_calls: BTreeMap<RoleTag, u64>,
    pub cache_hits: BTreeMap<RoleTag, u64>,
    pub retries: u64,
}

impl StatsSnapshot {
    pub fn total_backend_calls(&self) -> u64 {
        self.backend_calls.values().sum()
    }

    pub fn total_cache_hits(&self) -> u64 {
        self.cache_hits.values().sum()
    }

    pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        let diff = |now: &BTreeMap<RoleTag, u64>, then: &BTreeMap<RoleTag, u64>| {
            now.iter()
                .map(|(k, v)| (*k, v - then.get(k).copied().unwrap_or(0)))
                .collect()
        };
        StatsSnapshot {
            backend_calls: diff(&self.backend_calls, &earlier.backend_calls),
            cache_hits: diff(&self.cache_hits, &earlier.cache_hits),
            retries: self.retries - earlier.retries,
        }
    }
}

#[derive(Debug, Clone)]
struct Route {
    backend: Arc<dyn Backend>,
    limiter: Arc<Semaphore>,
    retry: RetryPolicy,
}

#[derive(Debug, Default)]
pub struct GatewayBuilder {
    backends: HashMap<String, Route>,
    roles: HashMap<RoleTag, String>,
    cache: Option<ResponseCache>,
}

impl GatewayBuilder {
    /// Registers a named backend with its own in-flight limit.
    pub fn backend(
        mut self,
        name: impl Into<String>,
        backend: Arc<dyn Backend>,
        max_in_flight: usize,
        retry: RetryPolicy,
    ) -> Self {
        self.backends.insert(
            name.into(),
            Route {
                backend,
                limiter: Arc::new(Semaphore::new(max_in_flight.max(1))),
                retry,
            },
        );
        self
    }

    pub fn route(mut self, role: RoleTag, backend_name: impl Into<String>) -> Self {
        self.roles.insert(role, backend_name.into());
        self
    }

    /// Shortcut: one backend serving every role.
    pub fn single(self, backend: Arc<dyn Backend>, max_in_flight: usize, retry: RetryPolicy) -> Self {
        let mut builder = self.backend("default", backend, max_in_flight, retry);
        for role in RoleTag::ALL {
            builder = builder.route(role, "default");
        }
        builder
    }

    pub fn cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn build(self) -> Result<Gateway> {
        let mut routes = HashMap::new();
        for (role, name) in self.roles {
            let route = self.backends.get(&name).ok_or_else(|| {
                Error::Config(format!("role {role} routes to undeclared backend {name}"))
            })?;
            routes.insert(role, route.clone());
        }
        Ok(Gateway {
            routes,
            cache: self.cache,
            stats: Arc::new(GatewayStats::default()),
        })
    }
}

/// Shareable handle; clones share routes, limits, cache and counters.
#[derive(Debug, Clone)]
pub struct Gateway {
    routes: HashMap<RoleTag, Route>,
    cache: Option<ResponseCache>,
    stats: Arc<GatewayStats>,
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    /// Free generation. Rejects requests carrying a teacher-forced completion.
    pub async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        if request.options.teacher_forced_completion.is_some() {
            return Err(Error::InvalidRequest(
                "teacher-forced completion is exclusive with free generation; use teacher_forced_logprobs".into(),
            ));
        }
        self.dispatch(request).await
    }

    /// Per-token log-probabilities of the supplied completion.
    pub async fn teacher_forced_logprobs(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        if request.options.teacher_forced_completion.is_none() {
            return Err(Error::InvalidRequest(
                "teacher_forced_logprobs needs a teacher_forced_completion".into(),
            ));
        }
        self.dispatch(request).await
    }

    pub fn capabilities(&self, role: RoleTag) -> Option<Capabilities> {
        self.routes.get(&role).map(|r| r.backend.capabilities())
    }

    pub fn stats(&self) -> StatsSnapshot {
        let collect = |counters: &[AtomicU64; 3]| {
            RoleTag::ALL
                .iter()
                .map(|r| (*r, counters[r.index()].load(Ordering::Relaxed)))
                .collect()
        };
        StatsSnapshot {
            backend_calls: collect(&self.stats.backend_calls),
            cache_hits: collect(&self.stats.cache_hits),
            retries: self.stats.retries.load(Ordering::Relaxed),
        }
    }

    pub fn cache_key(&self, request: &CompletionRequest) -> Result<CacheKey> {
        let route = self.route(request.role)?;
        Ok(CacheKey::new(
            route.backend.id(),
            route.backend.model(),
            request,
            route.backend.cache_salt(request).as_deref(),
        ))
    }

    fn route(&self, role: RoleTag) -> Result<&Route> {
        self.routes
            .get(&role)
            .ok_or_else(|| Error::Config(format!("no backend configured for role {role}")))
    }

    async fn dispatch(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        request.validate()?;
        let route = self.route(request.role)?;
        let backend = &route.backend;
        check_capabilities(backend.as_ref(), request)?;

        let key = CacheKey::new(
            backend.id(),
            backend.model(),
            request,
            backend.cache_salt(request).as_deref(),
        );
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&key) {
                self.stats.cache_hits[request.role.index()].fetch_add(1, Ordering::Relaxed);
                hit.cache_hit = true;
                return Ok(hit);
            }
        }

        let mut result = self.call_with_retries(route, request).await?;
        validate_result(backend.as_ref(), request, &mut result)?;
        result.cache_hit = false;
        if let Some(cache) = &self.cache {
            cache.put(&key, &result)?;
        }
        Ok(result)
    }

    async fn call_with_retries(&self, route: &Route, request: &CompletionRequest) -> Result<CompletionResult> {
        let attempts = route.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.stats.retries.fetch_add(1, Ordering::Relaxed);
                tokio::time::sleep(route.retry.delay(attempt - 1)).await;
            }
            let outcome = {
                let _permit = route.limiter.acquire().await.expect("semaphore is never closed");
                self.stats.backend_calls[request.role.index()].fetch_add(1, Ordering::Relaxed);
                route.backend.complete(request).await
            };
            match outcome {
                Ok(result) => return Ok(result),
                Err(BackendError::Fatal(e)) => return Err(e),
                Err(BackendError::Transient(message)) => {
                    tracing::warn!(
                        backend = route.backend.id(),
                        attempt = attempt + 1,
                        "transient backend failure: {message}"
                    );
                    last = message;
                }
            }
        }
        Err(Error::Transport(format!(
            "{} failed after {attempts} attempts: {last}",
            route.backend.id()
        )))
    }
}

fn check_capabilities(backend: &dyn Backend, request: &CompletionRequest) -> Result<()> {
    let caps = backend.capabilities();
    if request.options.top_logprobs > 0 && !caps.logprobs {
        return Err(Error::Capability(format!(
            "backend {} does not return log-probabilities",
            backend.id()
        )));
    }
    if request.options.teacher_forced_completion.is_some() && !caps.teacher_forcing {
        return Err(Error::Capability(format!(
            "backend {} cannot score a provided completion",
            backend.id()
        )));
    }
    if !request.images.is_empty() && !caps.images {
        return Err(Error::Capability(format!("backend {} does not accept images", backend.id())));
    }
    Ok(())
}

/// Log-probabilities above zero by less than this are rounding noise.
const LOGPROB_SLACK: f64 = 1e-6;

fn validate_result(backend: &dyn Backend, request: &CompletionRequest, result: &mut CompletionResult) -> Result<()> {
    let clamp = |lp: &mut f64| -> Result<()> {
        if lp.is_nan() || *lp > LOGPROB_SLACK {
            return Err(Error::Transport(format!(
                "backend {} returned invalid log-probability {lp}",
                backend.id()
            )));
        }
        *lp = lp.min(0.0);
        Ok(())
    };
    for lp in result.first_token_logprobs.values_mut() {
        clamp(lp)?;
    }
    if let Some(tokens) = result.token_logprobs.as_mut() {
        for lp in tokens.iter_mut() {
            clamp(lp)?;
        }
    }
    if request.options.top_logprobs > 0 && result.first_token_logprobs.is_empty() {
        return Err(Error::Capability(format!(
            "backend {} returned no first-token log-probabilities",
            backend.id()
        )));
    }
    if request.options.teacher_forced_completion.is_some() {
        match &result.token_logprobs {
            Some(tokens) if !tokens.is_empty() => {}
            _ => {
                return Err(Error::Capability(format!(
                    "backend {} returned no per-token log-probabilities",
                    backend.id()
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn png() -> Vec<u8> {
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([10, 20, 30]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn corrupt_image_bytes_are_rejected() {
        let err = ImagePayload::from_bytes("it1", b"not an image".to_vec()).unwrap_err();
        assert!(matches!(err, Error::Image { ref item_id, .. } if item_id == "it1"));
        let mut bytes = png();
        bytes.truncate(bytes.len() / 2);
        assert!(ImagePayload::from_bytes("it2", bytes).is_err());
        let ok = ImagePayload::from_bytes("it3", png()).unwrap();
        assert_eq!(ok.mime(), "image/png");
        assert!(ok.data_url().starts_with("data:image/png;base64,"));
    }

    #[test]
    fn image_requires_multimodal_role() {
        let img = ImagePayload::from_bytes("it", png()).unwrap();
        let req = CompletionRequest::new(RoleTag::PreferenceLlm, vec![Message::user("hi")]).with_image(img.clone());
        assert!(matches!(req.validate(), Err(Error::InvalidRequest(_))));
        let req = CompletionRequest::new(RoleTag::ItemMllm, vec![Message::user("hi")]).with_image(img);
        req.validate().unwrap();
    }

    #[test]
    fn option_invariants() {
        let mut req = CompletionRequest::new(RoleTag::ItemMllm, vec![Message::user("hi")]);
        req.options.max_tokens = 0;
        assert!(req.validate().is_err());
        req.options.max_tokens = 1;
        req.options.temperature = -0.1;
        assert!(req.validate().is_err());
        req.options.temperature = 0.7;
        req.validate().unwrap();
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { attempts: 5, base_delay_ms: 100, max_delay_ms: 350 };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
        assert_eq!(p.delay(80), Duration::from_millis(350));
    }

    #[derive(Debug)]
    struct Flaky {
        failures_left: AtomicU32,
        fatal: bool,
    }

    #[async_trait]
    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn model(&self) -> &str {
            "m"
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities { logprobs: false, teacher_forcing: false, images: false }
        }
        async fn complete(&self, _r: &CompletionRequest) -> Result<CompletionResult, BackendError> {
            if self.fatal {
                return Err(BackendError::Fatal(Error::Transport("401 unauthorized".into())));
            }
            if self.failures_left.load(Ordering::SeqCst) > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::Transient("503".into()));
            }
            Ok(CompletionResult::text("ok"))
        }
    }

    fn fast_retry(attempts: u32) -> RetryPolicy {
        RetryPolicy { attempts, base_delay_ms: 1, max_delay_ms: 2 }
    }

    #[tokio::test]
    async fn transient_failures_are_retried() {
        let backend = Arc::new(Flaky { failures_left: AtomicU32::new(2), fatal: false });
        let gw = Gateway::builder().single(backend, 1, fast_retry(3)).build().unwrap();
        let req = CompletionRequest::new(RoleTag::PreferenceLlm, vec![Message::user("x")]);
        assert_eq!(gw.complete(&req).await.unwrap().text, "ok");
        let stats = gw.stats();
        assert_eq!(stats.total_backend_calls(), 3);
        assert_eq!(stats.retries, 2);
    }

    #[tokio::test]
    async fn retries_exhaust_into_transport_error() {
        let backend = Arc::new(Flaky { failures_left: AtomicU32::new(10), fatal: false });
        let gw = Gateway::builder().single(backend, 1, fast_retry(2)).build().unwrap();
        let req = CompletionRequest::new(RoleTag::PreferenceLlm, vec![Message::user("x")]);
        let err = gw.complete(&req).await.unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[tokio::test]
    async fn fatal_failures_are_not_retried() {
        let backend = Arc::new(Flaky { failures_left: AtomicU32::new(0), fatal: true });
        let gw = Gateway::builder().single(backend, 1, fast_retry(5)).build().unwrap();
        let req = CompletionRequest::new(RoleTag::PreferenceLlm, vec![Message::user("x")]);
        assert!(gw.complete(&req).await.is_err());
        assert_eq!(gw.stats().total_backend_calls(), 1);
    }

    #[tokio::test]
    async fn missing_capability_is_reported() {
        let backend = Arc::new(Flaky { failures_left: AtomicU32::new(0), fatal: false });
        let gw = Gateway::builder().single(backend, 1, fast_retry(1)).build().unwrap();
        let mut req = CompletionRequest::new(RoleTag::RecommenderMllm, vec![Message::user("x")]);
        req.options.top_logprobs = 20;
        assert!(matches!(gw.complete(&req).await, Err(Error::Capability(_))));
        req.options.top_logprobs = 0;
        req.options.teacher_forced_completion = Some("yes".into());
        assert!(matches!(gw.teacher_forced_logprobs(&req).await, Err(Error::Capability(_))));
        assert!(matches!(gw.complete(&req).await, Err(Error::InvalidRequest(_))));
        assert_eq!(gw.stats().total_backend_calls(), 0);
    }

    #[test]
    fn undeclared_backend_is_a_config_error() {
        let err = Gateway::builder().route(RoleTag::ItemMllm, "nope").build().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

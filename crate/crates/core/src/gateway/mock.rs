//! Deterministic in-process backend for tests and offline runs.
//!
//! Generated text is a pure function of `(seed, request)`: it echoes the
//! longest words of every paragraph after the first (the first paragraph is
//! assumed to be the instruction) and pads with hash-chosen filler words. When
//! the prompt contains "about N words" the output has N words, capped by
//! `max_tokens`. Mock tokenization is whitespace splitting.
//!
//! Requests with `top_logprobs > 0` are answered as a yes/no classifier, and
//! teacher-forced requests are scored token by token, both according to the
//! configured [`MockBehavior`].

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Capabilities, CompletionRequest, CompletionResult, RoleTag, Usage};
use crate::error::Error;

const DEFAULT_WORDS: usize = 32;
const ECHO_PER_PARAGRAPH: usize = 2;
const MIN_ECHO_LEN: usize = 4;

const FILLER: [&str; 64] = [
    "vivid", "cozy", "rustic", "sleek", "playful", "minimal", "bold", "gentle", "classic", "modern",
    "bright", "muted", "compact", "sturdy", "elegant", "quirky", "warm", "cool", "sporty", "retro",
    "organic", "urban", "coastal", "festive", "calm", "dynamic", "soft", "glossy", "matte", "airy",
    "rugged", "refined", "casual", "formal", "vintage", "futuristic", "natural", "pastel", "neon",
    "earthy", "whimsical", "practical", "luxurious", "budget", "handmade", "digital", "acoustic",
    "cinematic", "narrative", "comedic", "dramatic", "scenic", "musical", "culinary", "travel",
    "family", "fitness", "gaming", "outdoor", "indoor", "seasonal", "trendy", "timeless", "quiet",
];

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Yes-probability drawn uniformly from the request hash.
    HashText,
    /// Mass `p` on "yes" when the request's (user, item) subject is a labeled
    /// positive, on "no" otherwise.
    OracleYes {
        p: f64,
        positives: Arc<HashSet<(String, String)>>,
    },
    /// Every scored token gets log-probability `-cost`.
    UniformLogprob { cost: f64 },
}

impl MockBehavior {
    pub fn oracle_yes(p: f64, positives: impl IntoIterator<Item = (String, String)>) -> Self {
        MockBehavior::OracleYes {
            p,
            positives: Arc::new(positives.into_iter().collect()),
        }
    }

    fn label(&self) -> String {
        match self {
            MockBehavior::HashText => "hash_text".into(),
            MockBehavior::OracleYes { p, .. } => format!("oracle_yes-p{p}"),
            MockBehavior::UniformLogprob { cost } => format!("uniform_logprob-c{cost}"),
        }
    }
}

/// Counters for instrumented tests.
#[derive(Debug, Default)]
pub struct MockStats {
    calls: [AtomicU64; 3],
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockStats {
    pub fn calls(&self, role: RoleTag) -> u64 {
        self.calls[role.index()].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> u64 {
        RoleTag::ALL.iter().map(|r| self.calls(*r)).sum()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        for c in &self.calls {
            c.store(0, Ordering::SeqCst);
        }
        self.peak_in_flight.store(0, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    behavior: MockBehavior,
    latency: Duration,
    model: String,
    stats: Arc<MockStats>,
}

impl MockBackend {
    pub fn new(seed: u64, behavior: MockBehavior) -> Self {
        let model = format!("{}-s{seed}", behavior.label());
        MockBackend {
            seed,
            behavior,
            latency: Duration::ZERO,
            model,
            stats: Arc::new(MockStats::default()),
        }
    }

    /// Sleeps this long inside every call, to make concurrency observable.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn stats(&self) -> Arc<MockStats> {
        Arc::clone(&self.stats)
    }

    fn digest(&self, request: &CompletionRequest, salt: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(salt.as_bytes());
        hasher.update(request.canonical_bytes());
        hasher.finalize().into()
    }

    fn is_positive(&self, request: &CompletionRequest) -> bool {
        match (&self.behavior, &request.subject.user_id, &request.subject.item_id) {
            (MockBehavior::OracleYes { positives, .. }, Some(user), Some(item)) => {
                positives.contains(&(user.clone(), item.clone()))
            }
            _ => false,
        }
    }

    fn generate(&self, request: &CompletionRequest) -> String {
        let all_text: String = request.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
        let wanted = requested_words(&all_text)
            .unwrap_or(DEFAULT_WORDS)
            .min(request.options.max_tokens as usize)
            .max(1);
        let mut words = echo_words(request.last_user_text());
        words.truncate(wanted);
        let mut rng = ChaCha8Rng::from_seed(self.digest(request, "text"));
        while words.len() < wanted {
            words.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
        }
        words.join(" ")
    }

    fn classify(&self, request: &CompletionRequest) -> BTreeMap<String, f64> {
        let mut entries: Vec<(String, f64)> = match &self.behavior {
            MockBehavior::HashText => {
                let u = unit_interval(&self.digest(request, "yes"));
                vec![
                    ("Yes".into(), (0.9 * 0.8 * u).ln()),
                    (" yes".into(), (0.9 * 0.2 * u).ln()),
                    ("No".into(), (0.9 * (1.0 - u)).ln()),
                    ("maybe".into(), 0.1f64.ln()),
                ]
            }
            MockBehavior::OracleYes { p, .. } => {
                let (yes, no) = if self.is_positive(request) { (*p, 1.0 - p) } else { (1.0 - p, *p) };
                [("yes", yes), ("no", no)]
                    .into_iter()
                    .filter(|(_, mass)| *mass > 0.0)
                    .map(|(t, mass)| (t.to_string(), mass.ln()))
                    .collect()
            }
            MockBehavior::UniformLogprob { cost } => {
                vec![("yes".into(), -cost), ("no".into(), -cost)]
            }
        };
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(request.options.top_logprobs as usize);
        entries.into_iter().collect()
    }

    fn score_forced(&self, request: &CompletionRequest, completion: &str) -> Vec<f64> {
        let tokens: Vec<&str> = completion.split_whitespace().collect();
        match &self.behavior {
            MockBehavior::UniformLogprob { cost } => vec![-cost; tokens.len()],
            MockBehavior::HashText => {
                let mut rng = ChaCha8Rng::from_seed(self.digest(request, "forced"));
                tokens.iter().map(|_| rng.random_range(0.05f64..1.0).ln()).collect()
            }
            MockBehavior::OracleYes { p, .. } => {
                let expected = if self.is_positive(request) { "yes" } else { "no" };
                tokens
                    .iter()
                    .enumerate()
                    .map(|(i, tok)| {
                        if i > 0 {
                            return 0.0;
                        }
                        let mass = if tok.trim().eq_ignore_ascii_case(expected) { *p } else { 1.0 - p };
                        mass.max(1e-12).ln()
                    })
                    .collect()
            }
        }
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { logprobs: true, teacher_forcing: true, images: true }
    }

    fn cache_salt(&self, request: &CompletionRequest) -> Option<String> {
        let scoring = request.options.top_logprobs > 0 || request.options.teacher_forced_completion.is_some();
        match (&self.behavior, scoring) {
            (MockBehavior::OracleYes { .. }, true) => Some(format!(
                "{}\0{}",
                request.subject.user_id.as_deref().unwrap_or(""),
                request.subject.item_id.as_deref().unwrap_or("")
            )),
            _ => None,
        }
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.stats.calls[request.role.index()].fetch_add(1, Ordering::SeqCst);
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        let result = self.answer(request);
        self.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

impl MockBackend {
    fn answer(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let prompt_tokens = request
            .messages
            .iter()
            .map(|m| m.text.split_whitespace().count())
            .sum::<usize>() as u32;

        if let Some(completion) = &request.options.teacher_forced_completion {
            if completion.split_whitespace().next().is_none() {
                return Err(BackendError::Fatal(Error::InvalidRequest(
                    "teacher-forced completion is empty".into(),
                )));
            }
            let token_logprobs = self.score_forced(request, completion);
            return Ok(CompletionResult {
                text: completion.clone(),
                first_token_logprobs: BTreeMap::new(),
                usage: Usage { prompt_tokens, completion_tokens: token_logprobs.len() as u32 },
                token_logprobs: Some(token_logprobs),
                cache_hit: false,
            });
        }

        if request.options.top_logprobs > 0 {
            let first_token_logprobs = self.classify(request);
            let text = first_token_logprobs
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(t, _)| t.trim().to_lowercase())
                .unwrap_or_default();
            return Ok(CompletionResult {
                text,
                first_token_logprobs,
                token_logprobs: None,
                usage: Usage { prompt_tokens, completion_tokens: 1 },
                cache_hit: false,
            });
        }

        let text = self.generate(request);
        Ok(CompletionResult {
            usage: Usage { prompt_tokens, completion_tokens: text.split_whitespace().count() as u32 },
            ..CompletionResult::text(text)
        })
    }
}

fn requested_words(text: &str) -> Option<usize> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| Regex::new(r"(?i)about (\d+) words").expect("valid regex"));
    re.captures(text).and_then(|c| c[1].parse().ok())
}

/// Longest distinct words of each paragraph after the first.
fn echo_words(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for paragraph in text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).skip(1) {
        let mut words: Vec<(usize, &str)> = paragraph
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| w.chars().count() >= MIN_ECHO_LEN)
            .enumerate()
            .collect();
        words.sort_by(|a, b| b.1.chars().count().cmp(&a.1.chars().count()).then(a.0.cmp(&b.0)));
        let mut taken = 0;
        for (_, word) in words {
            if taken == ECHO_PER_PARAGRAPH {
                break;
            }
            if seen.insert(word.to_string()) {
                out.push(word.to_string());
                taken += 1;
            }
        }
    }
    out
}

fn unit_interval(digest: &[u8; 32]) -> f64 {
    let x = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
    let u = (x >> 11) as f64 / (1u64 << 53) as f64;
    u.clamp(1e-6, 1.0 - 1e-6)
}

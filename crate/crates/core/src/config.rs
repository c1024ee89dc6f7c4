//! Run configuration: one TOML file, every field defaulted.
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::budget::TokenBudget;
use crate::catalog::{SplitSettings, Thresholds};
use crate::error::{Error, Result};
use crate::gateway::{
    Backend, Gateway, HttpBackend, HttpBackendConfig, MockBackend, MockBehavior, ResponseCache, RetryPolicy,
    RoleTag,
};
use crate::preference::{PreferenceMode, PreferenceSettings};
use crate::recommender::{FloorPolicy, RecommenderSettings, DEFAULT_SYSTEM_INSTRUCTION};
use crate::sft::LossSpan;
use crate::summarizer::{MissingImagePolicy, SummarizerSettings, SummaryMode};
use crate::templates::Templates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: PathBuf,
    pub items: PathBuf,
    pub out_dir: PathBuf,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    /// Shorter user sequences are dropped before splitting.
    pub min_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: PathBuf::from("interactions.jsonl"),
            items: PathBuf::from("items.jsonl"),
            out_dir: PathBuf::from("out"),
            min_user_interactions: 5,
            min_item_interactions: 5,
            min_seq_len: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_folds: usize,
    pub seeds: Vec<u64>,
    pub train_ratio: usize,
    pub eval_ratio: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_folds: 5, seeds: vec![42], train_ratio: 1, eval_ratio: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeConfig {
    pub mode: SummaryMode,
    pub target_words: usize,
    pub length_tolerance: f64,
    pub fuse_cap_tokens: usize,
    pub single_call: bool,
    pub missing_image: MissingImagePolicy,
    pub concurrency: usize,
}

impl Default for SummarizeConfig {
    fn default() -> Self {
        let s = SummarizerSettings::default();
        SummarizeConfig {
            mode: SummaryMode::Full,
            target_words: s.target_words,
            length_tolerance: s.length_tolerance,
            fuse_cap_tokens: s.fuse_cap_tokens,
            single_call: s.single_call,
            missing_image: s.missing_image,
            concurrency: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub mode: PreferenceMode,
    pub block_size: usize,
    pub summary_length: usize,
    pub max_prompt_tokens: usize,
    pub concurrency: usize,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        let p = PreferenceSettings::default();
        PreferenceConfig {
            mode: p.mode,
            block_size: p.block_size,
            summary_length: p.summary_length,
            max_prompt_tokens: p.max_prompt_tokens,
            concurrency: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub top_logprobs: u32,
    pub k: usize,
    pub floor_policy: FloorPolicy,
    pub attach_image: bool,
    pub max_prompt_tokens: usize,
    pub system_instruction: String,
    pub concurrency: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            top_logprobs: 20,
            k: 5,
            floor_policy: FloorPolicy::Neutral,
            attach_image: true,
            max_prompt_tokens: 512,
            system_instruction: DEFAULT_SYSTEM_INSTRUCTION.to_string(),
            concurrency: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub loss_span: LossSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub chars_per_token: f64,
    pub max_tokens: u32,
    pub temperature: f64,
    pub cache_dir: PathBuf,
    pub use_cache: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            chars_per_token: 4.0,
            max_tokens: 512,
            temperature: 0.0,
            cache_dir: PathBuf::from("cache"),
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    HashText,
    OracleYes,
    UniformLogprob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub enabled: bool,
    pub behavior: MockKind,
    /// Mass on the correct answer for `oracle_yes`.
    pub p: f64,
    /// Per-token cost for `uniform_logprob`.
    pub cost: f64,
    pub seed: u64,
    pub max_in_flight: usize,
    pub latency_ms: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            enabled: false,
            behavior: MockKind::HashText,
            p: 1.0,
            cost: std::f64::consts::LN_2,
            seed: 0,
            max_in_flight: 16,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesConfig {
    pub dir: Option<PathBuf>,
    /// Per-template overrides keyed by template name (e.g. `recommend`).
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub summarize: SummarizeConfig,
    pub preference: PreferenceConfig,
    pub recommender: RecommenderConfig,
    pub sft: SftConfig,
    pub gateway: GatewayConfig,
    pub backends: BTreeMap<String, HttpBackendConfig>,
    pub roles: BTreeMap<RoleTag, String>,
    pub mock: MockConfig,
    pub templates: TemplatesConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.interactions);
        fix(&mut self.data.items);
        fix(&mut self.data.out_dir);
        fix(&mut self.gateway.cache_dir);
        if let Some(dir) = self.templates.dir.as_mut() {
            fix(dir);
        }
        for path in self.templates.files.values_mut() {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.split;
        if s.n_folds < 2 {
            return bad(format!("split.n_folds must be >= 2, got {}", s.n_folds));
        }
        if s.seeds.is_empty() {
            return bad("split.seeds must not be empty".into());
        }
        if s.seeds.iter().collect::<HashSet<_>>().len() != s.seeds.len() {
            return bad("split.seeds contains duplicates".into());
        }
        if s.train_ratio < 1 || s.eval_ratio < 1 {
            return bad("split ratios must be >= 1".into());
        }
        if self.data.min_seq_len < 2 {
            return bad("data.min_seq_len must be >= 2".into());
        }
        if self.preference.block_size < 1 {
            return bad("preference.block_size must be >= 1".into());
        }
        if self.preference.summary_length < 1 {
            return bad("preference.summary_length must be >= 1".into());
        }
        if self.summarize.target_words < 1 || self.summarize.fuse_cap_tokens < 1 {
            return bad("summarize.target_words and fuse_cap_tokens must be >= 1".into());
        }
        if self.summarize.length_tolerance.is_nan() || self.summarize.length_tolerance < 0.0 {
            return bad("summarize.length_tolerance must be >= 0".into());
        }
        let r = &self.recommender;
        if r.top_logprobs < 1 {
            return bad("recommender.top_logprobs must be >= 1".into());
        }
        if r.k < 1 || r.k > s.eval_ratio + 1 {
            return bad(format!("recommender.k must be between 1 and {}", s.eval_ratio + 1));
        }
        if self.gateway.chars_per_token.is_nan() || self.gateway.chars_per_token <= 0.0 {
            return bad("gateway.chars_per_token must be positive".into());
        }
        if self.gateway.temperature.is_nan() || self.gateway.temperature < 0.0 {
            return bad("gateway.temperature must be >= 0".into());
        }
        if self.gateway.max_tokens < 1 {
            return bad("gateway.max_tokens must be >= 1".into());
        }
        if self.mock.enabled {
            if self.mock.behavior == MockKind::OracleYes && !(0.0..=1.0).contains(&self.mock.p) {
                return bad("mock.p must be in [0, 1]".into());
            }
        } else {
            for (role, name) in &self.roles {
                if !self.backends.contains_key(name) {
                    return bad(format!("role {role} routes to undeclared backend {name}"));
                }
            }
        }
        self.load_templates()?;
        Ok(())
    }

    pub fn load_templates(&self) -> Result<Templates> {
        Templates::load(self.templates.dir.as_ref(), &self.templates.files)
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget::new(self.gateway.chars_per_token)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            min_user_interactions: self.data.min_user_interactions,
            min_item_interactions: self.data.min_item_interactions,
        }
    }

    pub fn split_settings(&self, seed: u64) -> SplitSettings {
        SplitSettings {
            n_folds: self.split.n_folds,
            seed,
            train_ratio: self.split.train_ratio,
            eval_ratio: self.split.eval_ratio,
        }
    }

    pub fn summarizer_settings(&self) -> SummarizerSettings {
        let s = &self.summarize;
        SummarizerSettings {
            target_words: s.target_words,
            length_tolerance: s.length_tolerance,
            fuse_cap_tokens: s.fuse_cap_tokens,
            max_tokens: self.gateway.max_tokens,
            temperature: self.gateway.temperature,
            single_call: s.single_call,
            missing_image: s.missing_image,
            budget: self.budget(),
        }
    }

    pub fn preference_settings(&self) -> PreferenceSettings {
        let p = &self.preference;
        PreferenceSettings {
            mode: p.mode,
            block_size: p.block_size,
            summary_length: p.summary_length,
            max_prompt_tokens: p.max_prompt_tokens,
            max_tokens: self.gateway.max_tokens,
            temperature: self.gateway.temperature,
            budget: self.budget(),
        }
    }

    pub fn recommender_settings(&self) -> RecommenderSettings {
        let r = &self.recommender;
        RecommenderSettings {
            top_logprobs: r.top_logprobs,
            floor_policy: r.floor_policy,
            attach_image: r.attach_image,
            max_prompt_tokens: r.max_prompt_tokens,
            system_instruction: r.system_instruction.clone(),
            temperature: self.gateway.temperature,
            budget: self.budget(),
        }
    }

    /// Identity of whatever answers `role`: model and endpoint, or the mock
    /// configuration. Part of stage fingerprints.
    pub fn backend_identity(&self, role: RoleTag) -> String {
        if self.mock.enabled {
            let m = &self.mock;
            return match m.behavior {
                MockKind::HashText => format!("mock:hash_text:s{}", m.seed),
                MockKind::OracleYes => format!("mock:oracle_yes:p{}:s{}", m.p, m.seed),
                MockKind::UniformLogprob => format!("mock:uniform_logprob:c{}:s{}", m.cost, m.seed),
            };
        }
        match self.roles.get(&role).and_then(|name| self.backends.get(name).map(|b| (name, b))) {
            Some((name, b)) => format!("http:{name}:{}:{}", b.base_url, b.model),
            None => format!("unrouted:{role}"),
        }
    }

    fn mock_backend(&self, positives: &[(String, String)]) -> MockBackend {
        let m = &self.mock;
        let behavior = match m.behavior {
            MockKind::HashText => MockBehavior::HashText,
            MockKind::OracleYes => MockBehavior::oracle_yes(m.p, positives.iter().cloned()),
            MockKind::UniformLogprob => MockBehavior::UniformLogprob { cost: m.cost },
        };
        MockBackend::new(m.seed, behavior).with_latency(Duration::from_millis(m.latency_ms))
    }

    /// Gateway for this configuration. `positives` labels the oracle mock;
    /// other backends ignore it.
    pub fn build_gateway(&self, positives: &[(String, String)]) -> Result<(Gateway, Option<MockBackend>)> {
        let cache = self
            .gateway
            .use_cache
            .then(|| ResponseCache::new(&self.gateway.cache_dir));
        if self.mock.enabled {
            let mock = self.mock_backend(positives);
            let gateway = Gateway::builder()
                .single(Arc::new(mock.clone()), self.mock.max_in_flight, RetryPolicy::default())
                .cache(cache)
                .build()?;
            return Ok((gateway, Some(mock)));
        }
        let mut builder = Gateway::builder().cache(cache);
        for (name, cfg) in &self.backends {
            let backend: Arc<dyn Backend> = Arc::new(HttpBackend::new(name.clone(), cfg.clone())?);
            builder = builder.backend(name.clone(), backend, cfg.max_in_flight, cfg.retry);
        }
        for (role, name) in &self.roles {
            builder = builder.route(*role, name.clone());
        }
        Ok((builder.build()?, None))
    }
}

//! Stage orchestration.
//!
//! Every stage writes into `out/stages/<stage>-<fingerprint>/` and drops a
//! `_SUCCESS` marker last. A stage's fingerprint covers its own settings and
//! its upstream fingerprint, so a completed directory for the current
//! fingerprint is reused as-is and any semantic change lands in a new
//! directory. `out/manifest.json` records what the latest execution of each
//! stage did.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{build_sequences, build_split_manifest, Catalog, Item, Split, SplitRole, UserSequence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, MockBackend, RoleTag, StatsSnapshot};
use crate::io::{file_sha256, fingerprint, read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::metrics::{aggregate, evaluate, EvalReport, FoldMetrics, ReportConfig, UserEvalRecord};
use crate::preference::{PreferenceInferer, UserPreference};
use crate::recommender::{Recommender, YesNoScore};
use crate::sft::{eval_sft_loss, read_dataset, write_dataset, Hyperparams, LossReport, SftBuilder, SftMetadata, SCHEMA_VERSION};
use crate::summarizer::{ItemSummarizer, ItemSummary};
use crate::templates::{TemplateName, Templates};

const SUCCESS: &str = "_SUCCESS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    SummarizeItems,
    InferPreferences,
    BuildSft,
    Score,
    Evaluate,
    EvalLoss,
}

impl Stage {
    /// Stages `run` executes, in dependency order.
    pub const RUN: [Stage; 6] = [
        Stage::Ingest,
        Stage::SummarizeItems,
        Stage::InferPreferences,
        Stage::BuildSft,
        Stage::Score,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::SummarizeItems => "summarize-items",
            Stage::InferPreferences => "infer-preferences",
            Stage::BuildSft => "build-sft",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::EvalLoss => "eval-loss",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::SummarizeItems => Some(Stage::Ingest),
            Stage::InferPreferences => Some(Stage::SummarizeItems),
            Stage::BuildSft | Stage::Score => Some(Stage::InferPreferences),
            Stage::Evaluate => Some(Stage::Score),
            Stage::EvalLoss => Some(Stage::BuildSft),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub dir: PathBuf,
    pub reused: bool,
    pub backend_calls: BTreeMap<RoleTag, u64>,
    pub cache_hits: BTreeMap<RoleTag, u64>,
    pub retries: u64,
    pub wall_ms: u64,
}

impl StageRecord {
    pub fn total_backend_calls(&self) -> u64 {
        self.backend_calls.values().sum()
    }

    pub fn total_cache_hits(&self) -> u64 {
        self.cache_hits.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        if path.is_file() {
            read_json(&path)
        } else {
            Ok(RunManifest::default())
        }
    }
}

/// Per-invocation knobs that are not part of the config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Restrict scoring and loss evaluation to one fold.
    pub fold: Option<usize>,
}

/// One scored candidate of an evaluation user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub seed: u64,
    pub fold: usize,
    pub user_id: String,
    pub item_id: String,
    pub is_positive: bool,
    #[serde(flatten)]
    pub score: YesNoScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FoldRecord {
    seed: u64,
    fold: usize,
    #[serde(flatten)]
    record: UserEvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLoss {
    pub seed: u64,
    pub fold: usize,
    pub examples: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub backend: String,
    pub per_fold: Vec<FoldLoss>,
    pub overall: LossReport,
}

pub struct Pipeline {
    config: RunConfig,
    templates: Templates,
    force: bool,
    options: StageOptions,
    gateway: Option<(Gateway, Option<MockBackend>)>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let templates = config.load_templates()?;
        Ok(Pipeline { config, templates, force: false, options: StageOptions::default(), gateway: None })
    }

    /// Re-execute stages even when a completed output exists.
    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn with_options(mut self, options: StageOptions) -> Self {
        self.options = options;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.data.out_dir
    }

    /// The mock backend, once a stage has built the gateway with one.
    pub fn mock(&self) -> Option<&MockBackend> {
        self.gateway.as_ref().and_then(|(_, m)| m.as_ref())
    }

    // Fingerprints ---------------------------------------------------------

    fn input_hash(path: &Path, field: &str) -> Result<String> {
        file_sha256(path).map_err(|e| Error::Config(format!("data.{field} ({}): {e}", path.display())))
    }

    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let budget = c.gateway.chars_per_token;
        let value = match stage {
            Stage::Ingest => json!({
                "interactions": Self::input_hash(&c.data.interactions, "interactions")?,
                "items": Self::input_hash(&c.data.items, "items")?,
                "thresholds": c.thresholds(),
                "min_seq_len": c.data.min_seq_len,
                "split": {
                    "n_folds": c.split.n_folds,
                    "seeds": c.split.seeds,
                    "train_ratio": c.split.train_ratio,
                    "eval_ratio": c.split.eval_ratio,
                },
            }),
            Stage::SummarizeItems => json!({
                "mode": c.summarize.mode,
                "settings": c.summarizer_settings(),
                "templates": self.templates.fingerprint_of(&[
                    TemplateName::TextSummary,
                    TemplateName::ImageDescription,
                    TemplateName::Fusion,
                    TemplateName::SingleCall,
                    TemplateName::LengthCorrection,
                ]),
                "backend": c.backend_identity(RoleTag::ItemMllm),
            }),
            Stage::InferPreferences => json!({
                "settings": c.preference_settings(),
                "templates": self.templates.fingerprint_of(&[
                    TemplateName::InitialPreference,
                    TemplateName::UpdatePreference,
                    TemplateName::DirectPreference,
                    TemplateName::CompressPreference,
                ]),
                "backend": c.backend_identity(RoleTag::PreferenceLlm),
            }),
            Stage::BuildSft => json!({
                "schema_version": SCHEMA_VERSION,
                "attach_image": c.recommender.attach_image,
                "max_prompt_tokens": c.recommender.max_prompt_tokens,
                "system_instruction": c.recommender.system_instruction,
                "chars_per_token": budget,
                "templates": self.templates.fingerprint_of(&[TemplateName::Recommend]),
            }),
            Stage::Score => json!({
                "settings": c.recommender_settings(),
                "templates": self.templates.fingerprint_of(&[TemplateName::Recommend]),
                "backend": c.backend_identity(RoleTag::RecommenderMllm),
                "fold": self.options.fold,
            }),
            Stage::Evaluate => json!({ "k": c.recommender.k }),
            Stage::EvalLoss => json!({
                "span": c.sft.loss_span,
                "backend": c.backend_identity(RoleTag::RecommenderMllm),
                "fold": self.options.fold,
            }),
        };
        let upstream = match stage.upstream() {
            Some(up) => Some(self.fingerprint(up)?),
            None => None,
        };
        Ok(fingerprint(&json!({ "stage": stage.name(), "upstream": upstream, "settings": value })))
    }

    pub fn stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let fp = self.fingerprint(stage)?;
        Ok(self.out_dir().join("stages").join(format!("{}-{}", stage.name(), &fp[..12])))
    }

    pub fn is_complete(&self, stage: Stage) -> Result<bool> {
        Ok(self.stage_dir(stage)?.join(SUCCESS).is_file())
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage)?;
        if !dir.join(SUCCESS).is_file() {
            return Err(Error::Dependency(format!(
                "no completed {stage} output for the current configuration; run `msr {stage}` first"
            )));
        }
        Ok(dir)
    }

    // Execution ------------------------------------------------------------

    /// Runs `stage`, or reuses its completed output. Its upstream must be complete.
    pub async fn run_stage(&mut self, stage: Stage) -> Result<StageRecord> {
        let fingerprint = self.fingerprint(stage)?;
        let dir = self.stage_dir(stage)?;
        let started = Instant::now();
        let reused = dir.join(SUCCESS).is_file() && !self.force;
        let mut delta = StatsSnapshot::default();
        if reused {
            tracing::info!("{stage}: reusing {}", dir.display());
        } else {
            if let Some(up) = stage.upstream() {
                self.require(up)?;
            }
            tracing::info!("{stage}: running into {}", dir.display());
            let before = self.gateway.as_ref().map(|(g, _)| g.stats()).unwrap_or_default();
            std::fs::create_dir_all(&dir)?;
            let _ = std::fs::remove_file(dir.join(SUCCESS));
            match stage {
                Stage::Ingest => self.ingest(&dir)?,
                Stage::SummarizeItems => self.summarize_items(&dir).await?,
                Stage::InferPreferences => self.infer_preferences(&dir).await?,
                Stage::BuildSft => self.build_sft(&dir)?,
                Stage::Score => self.score(&dir).await?,
                Stage::Evaluate => self.evaluate(&dir)?,
                Stage::EvalLoss => self.eval_loss(&dir).await?,
            }
            write_atomic(&dir.join(SUCCESS), fingerprint.as_bytes())?;
            if let Some((g, _)) = &self.gateway {
                delta = g.stats().since(&before);
            }
        }
        let record = StageRecord {
            fingerprint,
            dir,
            reused,
            backend_calls: delta.backend_calls,
            cache_hits: delta.cache_hits,
            retries: delta.retries,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let mut manifest = RunManifest::load(self.out_dir())?;
        manifest.config_fingerprint = self.fingerprint(Stage::Evaluate)?;
        manifest.stages.insert(stage, record.clone());
        write_json(&RunManifest::path(self.out_dir()), &manifest)?;
        tracing::info!(
            "{stage}: done in {} ms, {} backend calls, {} cache hits{}",
            record.wall_ms,
            record.total_backend_calls(),
            record.total_cache_hits(),
            if reused { " (reused)" } else { "" }
        );
        Ok(record)
    }

    /// Runs `stages` in order and returns the resulting manifest.
    pub async fn run(&mut self, stages: &[Stage]) -> Result<RunManifest> {
        for stage in stages {
            self.run_stage(*stage).await?;
        }
        RunManifest::load(self.out_dir())
    }

    fn ingest(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (catalog, report) = Catalog::ingest(&c.data.interactions, &c.data.items, c.thresholds())?;
        let sequences = build_sequences(&catalog, c.data.min_seq_len);
        let mut splits = Vec::new();
        for seed in &c.split.seeds {
            splits.extend(build_split_manifest(&catalog, &sequences, c.split_settings(*seed))?);
        }
        tracing::info!(
            "ingest: {} users, {} items, {} interactions, {} splits",
            report.users,
            report.items,
            report.interactions,
            splits.len()
        );
        write_jsonl(&dir.join("items.jsonl"), catalog.items())?;
        write_jsonl(&dir.join("interactions.jsonl"), catalog.interactions())?;
        write_jsonl(&dir.join("sequences.jsonl"), &sequences)?;
        write_jsonl(&dir.join("splits.jsonl"), &splits)?;
        write_json(&dir.join("report.json"), &report)
    }

    fn load_ingest(&self) -> Result<(Vec<Item>, Vec<UserSequence>, Vec<Split>)> {
        let dir = self.require(Stage::Ingest)?;
        Ok((
            read_jsonl(&dir.join("items.jsonl"))?,
            read_jsonl(&dir.join("sequences.jsonl"))?,
            read_jsonl(&dir.join("splits.jsonl"))?,
        ))
    }

    fn load_preferences(&self) -> Result<BTreeMap<String, String>> {
        let dir = self.require(Stage::InferPreferences)?;
        let prefs: Vec<UserPreference> = read_jsonl(&dir.join("preferences.jsonl"))?;
        Ok(prefs.into_iter().map(|p| (p.user_id, p.preference)).collect())
    }

    /// Builds the gateway on first use. Oracle labels are every user's held-out item.
    fn gateway(&mut self) -> Result<Gateway> {
        if self.gateway.is_none() {
            let (_, sequences, _) = self.load_ingest()?;
            let positives: Vec<(String, String)> = sequences
                .iter()
                .filter_map(|s| s.last().map(|last| (s.user_id.clone(), last.clone())))
                .collect();
            self.gateway = Some(self.config.build_gateway(&positives)?);
        }
        Ok(self.gateway.as_ref().expect("just built").0.clone())
    }

    async fn summarize_items(&mut self, dir: &Path) -> Result<()> {
        let gateway = self.gateway()?;
        let (items, _, _) = self.load_ingest()?;
        let summarizer = ItemSummarizer::new(&gateway, &self.templates, self.config.summarizer_settings());
        let summaries = summarizer
            .summarize_all(&items, self.config.summarize.mode, self.config.summarize.concurrency)
            .await?;
        let warnings: usize = summaries.iter().map(|s| s.warnings.len()).sum();
        if warnings > 0 {
            tracing::warn!("summarize-items: {warnings} warnings recorded in summaries.jsonl");
        }
        write_jsonl(&dir.join("summaries.jsonl"), &summaries)
    }

    async fn infer_preferences(&mut self, dir: &Path) -> Result<()> {
        let gateway = self.gateway()?;
        let (_, sequences, _) = self.load_ingest()?;
        let summaries: Vec<ItemSummary> =
            read_jsonl(&self.require(Stage::SummarizeItems)?.join("summaries.jsonl"))?;
        let by_item: HashMap<&str, &str> = summaries
            .iter()
            .map(|s| (s.item_id.as_str(), s.unified_summary.as_str()))
            .collect();
        let users = sequences
            .iter()
            .map(|seq| {
                let history = seq
                    .history()
                    .iter()
                    .map(|item| {
                        by_item.get(item.as_str()).map(|s| s.to_string()).ok_or_else(|| {
                            Error::Data(format!("no summary for item {item} in user {}'s history", seq.user_id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((seq.user_id.clone(), history))
            })
            .collect::<Result<Vec<_>>>()?;
        let inferer = PreferenceInferer::new(&gateway, &self.templates, self.config.preference_settings())?;
        let preferences = inferer.infer_all(&users, self.config.preference.concurrency).await?;
        let compressions: usize = preferences.iter().map(|p| p.trace.compressions).sum();
        if compressions > 0 {
            tracing::info!("infer-preferences: {compressions} summaries compressed to fit the prompt budget");
        }
        write_jsonl(&dir.join("preferences.jsonl"), &preferences)
    }

    fn build_sft(&self, dir: &Path) -> Result<()> {
        let (items, sequences, splits) = self.load_ingest()?;
        let preferences = self.load_preferences()?;
        let catalog = Catalog::from_parts(items, Vec::new());
        let settings = self.config.recommender_settings();
        let builder = SftBuilder { catalog: &catalog, templates: &self.templates, settings: &settings };
        let ratio = self.config.split.train_ratio;
        let mut index = Vec::new();
        for seed in &self.config.split.seeds {
            for fold in 0..self.config.split.n_folds {
                let select = |role: SplitRole| -> Vec<Split> {
                    splits
                        .iter()
                        .filter(|s| s.seed == *seed && s.fold == fold && s.role == role)
                        .cloned()
                        .collect()
                };
                for (kind, role) in [("train", SplitRole::Train), ("heldout", SplitRole::Eval)] {
                    let examples = builder.build(&select(role), &preferences, ratio, *seed)?;
                    let name = format!("seed{seed}-fold{fold}.{kind}.jsonl");
                    let metadata = SftMetadata {
                        schema_version: SCHEMA_VERSION,
                        fold,
                        train_ratio: ratio,
                        seed: *seed,
                        examples: examples.len(),
                        recommended_hyperparams: Hyperparams::default(),
                    };
                    write_dataset(&dir.join(&name), &metadata, &examples)?;
                    index.push(json!({ "file": name, "seed": seed, "fold": fold, "kind": kind, "examples": examples.len() }));
                }
            }
        }
        tracing::info!("build-sft: {} files for {} users", index.len(), sequences.len());
        write_json(&dir.join("index.json"), &index)
    }

    async fn score(&mut self, dir: &Path) -> Result<()> {
        let gateway = self.gateway()?;
        let (items, _, splits) = self.load_ingest()?;
        let preferences = self.load_preferences()?;
        let items: HashMap<&str, &Item> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
        let recommender = Recommender::new(&gateway, &self.templates, self.config.recommender_settings())?;

        let mut jobs = Vec::new();
        for split in splits.iter().filter(|s| s.role == SplitRole::Eval) {
            if self.options.fold.is_some_and(|f| f != split.fold) {
                continue;
            }
            let preference = preferences.get(&split.user_id).ok_or_else(|| {
                Error::Dependency(format!("no preference for user {}; run infer-preferences first", split.user_id))
            })?;
            let candidates = std::iter::once((&split.target, true)).chain(split.negatives.iter().map(|n| (n, false)));
            for (item_id, is_positive) in candidates {
                let item = *items
                    .get(item_id.as_str())
                    .ok_or_else(|| Error::Data(format!("split references unknown item {item_id}")))?;
                jobs.push((split, preference.as_str(), item, is_positive));
            }
        }
        if jobs.is_empty() {
            return Err(Error::Data("no evaluation candidates to score".into()));
        }
        let recommender = &recommender;
        let records: Vec<ScoreRecord> = futures::stream::iter(jobs)
            .map(|(split, preference, item, is_positive)| async move {
                let scored = recommender.score(&split.user_id, preference, item).await?;
                Ok::<_, Error>(ScoreRecord {
                    seed: split.seed,
                    fold: split.fold,
                    user_id: split.user_id.clone(),
                    item_id: item.item_id.clone(),
                    is_positive,
                    score: scored.score,
                })
            })
            .buffered(self.config.recommender.concurrency.max(1))
            .try_collect()
            .await?;
        let floored = records.iter().filter(|r| r.score.floor_applied).count();
        if floored > 0 {
            tracing::info!("score: floor applied to {floored} of {} candidates", records.len());
        }
        write_jsonl(&dir.join("scores.jsonl"), &records)
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let scores: Vec<ScoreRecord> = read_jsonl(&self.require(Stage::Score)?.join("scores.jsonl"))?;
        let eval_ratio = self.config.split.eval_ratio;
        let k = self.config.recommender.k;

        let mut grouped: BTreeMap<(u64, usize, &str), Vec<&ScoreRecord>> = BTreeMap::new();
        for s in &scores {
            grouped.entry((s.seed, s.fold, s.user_id.as_str())).or_default().push(s);
        }
        let mut per_fold: BTreeMap<(u64, usize), Vec<UserEvalRecord>> = BTreeMap::new();
        let mut rows = Vec::new();
        for ((seed, fold, user), candidates) in grouped {
            let positives: Vec<_> = candidates.iter().filter(|c| c.is_positive).collect();
            let negatives: Vec<(String, f64)> = candidates
                .iter()
                .filter(|c| !c.is_positive)
                .map(|c| (c.item_id.clone(), c.score.p))
                .collect();
            if positives.len() != 1 || negatives.len() != eval_ratio {
                return Err(Error::Data(format!(
                    "user {user} (seed {seed}, fold {fold}) has {} positives and {} negatives; expected 1 and {eval_ratio}",
                    positives.len(),
                    negatives.len()
                )));
            }
            let record = UserEvalRecord::from_scores(user, (&positives[0].item_id, positives[0].score.p), &negatives)?;
            rows.push(FoldRecord { seed, fold, record: record.clone() });
            per_fold.entry((seed, fold)).or_default().push(record);
        }
        let folds = per_fold
            .iter()
            .map(|((seed, fold), records)| evaluate(*seed, *fold, records, k))
            .collect::<Result<Vec<FoldMetrics>>>()?;
        let c = &self.config;
        let report = aggregate(
            folds,
            k,
            ReportConfig {
                summarize_mode: serde_json::to_value(c.summarize.mode)?.as_str().unwrap_or_default().to_string(),
                preference_mode: serde_json::to_value(c.preference.mode)?.as_str().unwrap_or_default().to_string(),
                block_size: c.preference.block_size,
                summary_length: c.preference.summary_length,
                seeds: c.split.seeds.clone(),
                fingerprint: self.fingerprint(Stage::Evaluate)?,
            },
        )?;
        write_jsonl(&dir.join("records.jsonl"), &rows)?;
        write_json(&dir.join("report.json"), &report)?;
        write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())
    }

    async fn eval_loss(&mut self, dir: &Path) -> Result<()> {
        let gateway = self.gateway()?;
        let sft_dir = self.require(Stage::BuildSft)?;
        let span = self.config.sft.loss_span;
        let concurrency = self.config.recommender.concurrency;
        let mut per_fold = Vec::new();
        let mut all = Vec::new();
        for seed in &self.config.split.seeds {
            for fold in 0..self.config.split.n_folds {
                if self.options.fold.is_some_and(|f| f != fold) {
                    continue;
                }
                let path = sft_dir.join(format!("seed{seed}-fold{fold}.heldout.jsonl"));
                let (_, examples) = read_dataset(&path)?;
                let report = eval_sft_loss(&gateway, &examples, span, concurrency).await?;
                per_fold.push(FoldLoss { seed: *seed, fold, examples: report.examples, mean_loss: report.mean_loss });
                all.extend(report.per_example);
            }
        }
        let overall = LossReport::from_losses(span, all)?;
        tracing::info!("eval-loss: mean loss {:.6} over {} examples", overall.mean_loss, overall.examples);
        let summary = LossSummary {
            backend: self.config.backend_identity(RoleTag::RecommenderMllm),
            per_fold,
            overall,
        };
        write_json(&dir.join("loss.json"), &summary)
    }

    // Results --------------------------------------------------------------

    pub fn load_report(&self) -> Result<EvalReport> {
        read_json(&self.require(Stage::Evaluate)?.join("report.json"))
    }

    pub fn load_report_table(&self) -> Result<String> {
        Ok(std::fs::read_to_string(self.require(Stage::Evaluate)?.join("report.txt"))?)
    }

    pub fn load_loss(&self) -> Result<LossSummary> {
        read_json(&self.require(Stage::EvalLoss)?.join("loss.json"))
    }
}

// Sweeps ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    BlockSize,
    SummaryLength,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::BlockSize => "block_size",
            SweepParam::SummaryLength => "summary_length",
        }
    }

    fn apply(self, config: &mut RunConfig, value: usize) {
        match self {
            SweepParam::BlockSize => config.preference.block_size = value,
            SweepParam::SummaryLength => config.preference.summary_length = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "block_size" => Ok(SweepParam::BlockSize),
            "summary_length" => Ok(SweepParam::SummaryLength),
            _ => Err(Error::Config(format!(
                "cannot sweep {s}; choose block_size or summary_length"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub ok: bool,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Tab-separated, one row per value; failed rows carry empty metrics.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{}\tstatus\tauc\tauc_hw\thr_at_{k}\thr_at_{k}_hw\tmrr_at_{k}\tmrr_at_{k}_hw\n",
            self.parameter.as_str(),
            k = self.k
        );
        for row in &self.rows {
            let cells = match &row.report {
                Some(r) => [&r.auc, &r.hr_at_k, &r.mrr_at_k]
                    .iter()
                    .map(|m| format!("{}\t{}", m.mean, m.half_width.map(|h| h.to_string()).unwrap_or_default()))
                    .collect::<Vec<_>>()
                    .join("\t"),
                None => "\t\t\t\t\t".to_string(),
            };
            out.push_str(&format!("{}\t{}\t{cells}\n", row.value, if row.ok { "ok" } else { "failed" }));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let k = self.k;
        let mut out = format!(
            "{:>14}  {:<7} {:>8} {:>8} {:>8}  {:>10}  {}\n",
            self.parameter.as_str(),
            "status",
            "AUC",
            format!("HR@{k}"),
            format!("MRR@{k}"),
            "pref calls",
            "reused stages"
        );
        for row in &self.rows {
            let reused: Vec<&str> = row.stages.iter().filter(|(_, r)| r.reused).map(|(s, _)| s.name()).collect();
            let pref_calls = row
                .stages
                .get(&Stage::InferPreferences)
                .map(|r| r.total_backend_calls().to_string())
                .unwrap_or_default();
            match &row.report {
                Some(r) => out.push_str(&format!(
                    "{:>14}  {:<7} {:>8.4} {:>8.4} {:>8.4}  {:>10}  {}\n",
                    row.value,
                    "ok",
                    r.auc.mean,
                    r.hr_at_k.mean,
                    r.mrr_at_k.mean,
                    pref_calls,
                    reused.join(",")
                )),
                None => out.push_str(&format!(
                    "{:>14}  {:<7} {}\n",
                    row.value,
                    "failed",
                    row.error.as_deref().unwrap_or("")
                )),
            }
        }
        out
    }
}

/// Evaluates every value of `parameter`, reusing whatever upstream stages are
/// unaffected. A failing value yields a failed row and the sweep continues.
pub async fn sweep(base: &RunConfig, parameter: SweepParam, values: &[usize]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over {} needs at least one value", parameter.as_str())));
    }
    base.validate()?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut config = base.clone();
        parameter.apply(&mut config, value);
        let mut stages = BTreeMap::new();
        let outcome = async {
            let mut pipeline = Pipeline::new(config)?;
            for stage in [Stage::Ingest, Stage::SummarizeItems, Stage::InferPreferences, Stage::Score, Stage::Evaluate] {
                stages.insert(stage, pipeline.run_stage(stage).await?);
            }
            pipeline.load_report()
        }
        .await;
        match outcome {
            Ok(report) => rows.push(SweepRow { value, ok: true, error: None, report: Some(report), stages }),
            Err(e) => {
                tracing::warn!("sweep {}={value} failed: {e}", parameter.as_str());
                rows.push(SweepRow { value, ok: false, error: Some(e.to_string()), report: None, stages });
            }
        }
    }
    let report = SweepReport { parameter, k: base.recommender.k, rows };
    let dir = base.data.out_dir.join("sweeps");
    write_atomic(&dir.join(format!("{}.tsv", parameter.as_str())), report.to_tsv().as_bytes())?;
    write_json(&dir.join(format!("{}.json", parameter.as_str())), &report)?;
    Ok(report)
}

//! Supervised fine-tuning export and teacher-forced loss evaluation.
//!
//! Each example is a three-turn conversation (system instruction, user turn
//! with preference and candidate, assistant label "yes" or "no"). The loss of
//! an example is the sum of negative log-probabilities of the scored tokens
//! given everything before them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use futures::{StreamExt, TryStreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Split};
use crate::error::{Error, Result};
use crate::gateway::{CompletionOptions, CompletionRequest, Gateway, ImagePayload, Message, RoleTag, Speaker};
use crate::io::{derive_seed, write_atomic};
use crate::recommender::{build_messages, RecommenderSettings};
use crate::templates::Templates;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
        }
    }
}

/// Which tokens an example's loss sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    /// The assistant label only, conditioned on the full prompt.
    #[default]
    Label,
    /// The user turn and the label, conditioned on the system instruction.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub user_id: String,
    pub item_id: String,
    pub fold: usize,
    pub seed: u64,
    pub is_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub conversation: Vec<Turn>,
    pub images: Vec<String>,
    pub label: Label,
    pub provenance: Provenance,
}

impl SftExample {
    pub fn validate(&self) -> Result<()> {
        let roles: Vec<Speaker> = self.conversation.iter().map(|t| t.role).collect();
        if roles != [Speaker::System, Speaker::User, Speaker::Assistant] {
            return Err(Error::Data(format!("example {}: expected system, user, assistant turns", self.id)));
        }
        if self.conversation[2].text != self.label.as_str() {
            return Err(Error::Data(format!("example {}: assistant turn does not match label", self.id)));
        }
        if self.provenance.is_negative != (self.label == Label::No) {
            return Err(Error::Data(format!("example {}: label disagrees with provenance", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lora_rank: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    pub epochs: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { lora_rank: 8, learning_rate: 2e-5, batch_size: 1, grad_accum_steps: 8, epochs: 10 }
    }
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetadata {
    pub schema_version: u32,
    pub fold: usize,
    pub train_ratio: usize,
    pub seed: u64,
    pub examples: usize,
    pub recommended_hyperparams: Hyperparams,
}

/// Everything needed to turn splits into conversations.
pub struct SftBuilder<'a> {
    pub catalog: &'a Catalog,
    pub templates: &'a Templates,
    pub settings: &'a RecommenderSettings,
}

impl SftBuilder<'_> {
    fn example(&self, split: &Split, preference: &str, item_id: &str, label: Label) -> Result<SftExample> {
        let item = self
            .catalog
            .item(item_id)
            .ok_or_else(|| Error::Data(format!("split references unknown item {item_id}")))?;
        let messages = build_messages(self.templates, self.settings, preference, item)?;
        let mut conversation: Vec<Turn> = messages
            .into_iter()
            .map(|m| Turn { role: m.speaker, text: m.text })
            .collect();
        conversation.push(Turn { role: Speaker::Assistant, text: label.as_str().to_string() });
        let images = match &item.image_ref {
            Some(r) if self.settings.attach_image && ImagePayload::reference_exists(r) => vec![r.clone()],
            _ => Vec::new(),
        };
        Ok(SftExample {
            id: format!("s{}-f{}-{}-{}", split.seed, split.fold, split.user_id, item_id),
            conversation,
            images,
            label,
            provenance: Provenance {
                user_id: split.user_id.clone(),
                item_id: item_id.to_string(),
                fold: split.fold,
                seed: split.seed,
                is_negative: label == Label::No,
            },
        })
    }

    /// One positive plus the first `ratio` negatives of every split, shuffled
    /// with `seed`. Every split user needs a preference.
    pub fn build(
        &self,
        splits: &[Split],
        preferences: &BTreeMap<String, String>,
        ratio: usize,
        seed: u64,
    ) -> Result<Vec<SftExample>> {
        let mut examples = Vec::with_capacity(splits.len() * (ratio + 1));
        for split in splits {
            let preference = preferences.get(&split.user_id).ok_or_else(|| {
                Error::Dependency(format!(
                    "no preference for user {}; run infer-preferences first",
                    split.user_id
                ))
            })?;
            if split.negatives.len() < ratio {
                return Err(Error::Data(format!(
                    "user {} has {} negatives, need {ratio}",
                    split.user_id,
                    split.negatives.len()
                )));
            }
            examples.push(self.example(split, preference, &split.target, Label::Yes)?);
            for negative in &split.negatives[..ratio] {
                examples.push(self.example(split, preference, negative, Label::No)?);
            }
        }
        let fold = splits.first().map(|s| s.fold.to_string()).unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["sft", &fold]));
        examples.shuffle(&mut rng);
        Ok(examples)
    }
}

pub fn write_dataset(path: &Path, metadata: &SftMetadata, examples: &[SftExample]) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, metadata)?;
    out.push(b'\n');
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.push(b'\n');
    }
    out.flush()?;
    write_atomic(path, &out)
}

pub fn read_dataset(path: &Path) -> Result<(SftMetadata, Vec<SftExample>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))?;
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let metadata: SftMetadata = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
    if metadata.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported schema version {}",
            path.display(),
            metadata.schema_version
        )));
    }
    let mut examples = Vec::new();
    for (i, line) in lines {
        let example: SftExample = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e))?;
        example.validate()?;
        examples.push(example);
    }
    Ok((metadata, examples))
}

/// Negative summed log-probability of `completion` given `messages`.
pub async fn forced_loss(gateway: &Gateway, request: CompletionRequest, completion: &str) -> Result<f64> {
    let mut request = request;
    request.options = CompletionOptions {
        max_tokens: 1,
        temperature: 0.0,
        top_logprobs: 0,
        teacher_forced_completion: Some(completion.to_string()),
    };
    let result = gateway.teacher_forced_logprobs(&request).await?;
    let tokens = result.token_logprobs.unwrap_or_default();
    Ok(-tokens.iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub span: LossSpan,
    pub examples: usize,
    pub mean_loss: f64,
    /// Sorted by example id.
    pub per_example: Vec<(String, f64)>,
}

impl LossReport {
    pub fn from_losses(span: LossSpan, mut per_example: Vec<(String, f64)>) -> Result<Self> {
        if per_example.is_empty() {
            return Err(Error::Precondition("no examples to evaluate".into()));
        }
        per_example.sort_by(|a, b| a.0.cmp(&b.0));
        let total: f64 = per_example.iter().map(|(_, l)| l).sum();
        Ok(LossReport {
            span,
            examples: per_example.len(),
            mean_loss: total / per_example.len() as f64,
            per_example,
        })
    }
}

async fn example_loss(gateway: &Gateway, example: &SftExample, span: LossSpan) -> Result<(String, f64)> {
    example.validate()?;
    let system = Message::system(example.conversation[0].text.clone());
    let user_text = &example.conversation[1].text;
    let label = example.label.as_str();
    let (messages, completion) = match span {
        LossSpan::Label => (vec![system, Message::user(user_text.clone())], label.to_string()),
        LossSpan::Full => (vec![system], format!("{user_text}\n\n{label}")),
    };
    let mut request = CompletionRequest::new(RoleTag::RecommenderMllm, messages)
        .with_subject(Some(&example.provenance.user_id), Some(&example.provenance.item_id));
    for path in &example.images {
        request = request.with_image(ImagePayload::load(&example.provenance.item_id, path).await?);
    }
    let loss = forced_loss(gateway, request, &completion)
        .await
        .map_err(|e| e.context(format!("example {}", example.id)))?;
    Ok((example.id.clone(), loss))
}

/// Per-example losses and their mean, reduced in example-id order.
pub async fn eval_sft_loss(
    gateway: &Gateway,
    examples: &[SftExample],
    span: LossSpan,
    concurrency: usize,
) -> Result<LossReport> {
    let losses: Vec<(String, f64)> = futures::stream::iter(examples)
        .map(|example| example_loss(gateway, example, span))
        .buffer_unordered(concurrency.max(1))
        .try_collect()
        .await?;
    LossReport::from_losses(span, losses)
}

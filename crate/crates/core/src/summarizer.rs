//! Multimodal item summarization: the description and the image are first
//! summarized by separate prompts with the same length target, then fused
//! into one unified textual profile.

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::budget::{word_count, TokenBudget};
use crate::catalog::Item;
use crate::error::{Error, Result};
use crate::gateway::{CompletionOptions, CompletionRequest, Gateway, ImagePayload, Message, RoleTag};
use crate::templates::{TemplateName, Templates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    Full,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingImagePolicy {
    /// Summarize from text only and record a warning.
    Fallback,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerSettings {
    pub target_words: usize,
    /// Allowed `|a - b| / max(a, b)` between text-summary and image-description word counts.
    pub length_tolerance: f64,
    pub fuse_cap_tokens: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    pub single_call: bool,
    pub missing_image: MissingImagePolicy,
    pub budget: TokenBudget,
}

impl Default for SummarizerSettings {
    fn default() -> Self {
        SummarizerSettings {
            target_words: 80,
            length_tolerance: 0.5,
            fuse_cap_tokens: 160,
            max_tokens: 512,
            temperature: 0.0,
            single_call: false,
            missing_image: MissingImagePolicy::Fallback,
            budget: TokenBudget::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub text_summary: String,
    pub image_description: Option<String>,
    pub unified_summary: String,
    pub mode: SummaryMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Relative length gap between two texts, in words.
pub fn length_gap(a: &str, b: &str) -> f64 {
    let (a, b) = (word_count(a) as f64, word_count(b) as f64);
    let max = a.max(b);
    if max == 0.0 {
        0.0
    } else {
        (a - b).abs() / max
    }
}

pub struct ItemSummarizer<'a> {
    gateway: &'a Gateway,
    templates: &'a Templates,
    settings: SummarizerSettings,
}

impl<'a> ItemSummarizer<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates, settings: SummarizerSettings) -> Self {
        ItemSummarizer { gateway, templates, settings }
    }

    pub fn settings(&self) -> &SummarizerSettings {
        &self.settings
    }

    fn options(&self) -> CompletionOptions {
        CompletionOptions {
            max_tokens: self.settings.max_tokens,
            temperature: self.settings.temperature,
            ..Default::default()
        }
    }

    fn target(&self) -> String {
        self.settings.target_words.to_string()
    }

    async fn ask(&self, item: &Item, messages: Vec<Message>, image: Option<&ImagePayload>) -> Result<String> {
        let mut request = CompletionRequest::new(RoleTag::ItemMllm, messages)
            .with_options(self.options())
            .with_subject(None, Some(&item.item_id));
        if let Some(image) = image {
            request = request.with_image(image.clone());
        }
        let result = self
            .gateway
            .complete(&request)
            .await
            .map_err(|e| e.context(format!("item {}", item.item_id)))?;
        Ok(result.text.trim().to_string())
    }

    fn text_prompt(&self, item: &Item) -> String {
        self.templates.render(
            TemplateName::TextSummary,
            &[("description", &item.description), ("target_words", &self.target())],
        )
    }

    fn image_prompt(&self) -> String {
        self.templates
            .render(TemplateName::ImageDescription, &[("target_words", &self.target())])
    }

    /// One text-only call summarizing the item description.
    pub async fn summarize_text(&self, item: &Item) -> Result<String> {
        if item.description.trim().is_empty() {
            return Err(Error::Precondition(format!("item {} has an empty description", item.item_id)));
        }
        self.ask(item, vec![Message::user(self.text_prompt(item))], None).await
    }

    /// Loads the item image.
    pub async fn load_image(&self, item: &Item) -> Result<ImagePayload> {
        let image_ref = item.image_ref.as_deref().ok_or_else(|| Error::Image {
            item_id: item.item_id.clone(),
            message: "item has no image_ref".into(),
        })?;
        ImagePayload::load(&item.item_id, image_ref).await
    }

    /// One call with the item image attached.
    pub async fn describe_image(&self, item: &Item) -> Result<String> {
        let image = self.load_image(item).await?;
        self.describe_loaded(item, &image).await
    }

    async fn describe_loaded(&self, item: &Item, image: &ImagePayload) -> Result<String> {
        self.ask(item, vec![Message::user(self.image_prompt())], Some(image)).await
    }

    /// Merges both modality summaries; output is truncated to the fuse cap.
    pub async fn fuse(&self, item: &Item, text_summary: &str, image_description: &str) -> Result<String> {
        if text_summary.trim().is_empty() || image_description.trim().is_empty() {
            return Err(Error::Precondition(format!(
                "item {}: fusion needs a non-empty text summary and image description",
                item.item_id
            )));
        }
        let prompt = self.templates.render(
            TemplateName::Fusion,
            &[
                ("text_summary", text_summary),
                ("image_description", image_description),
                ("target_words", &self.target()),
            ],
        );
        let fused = self.ask(item, vec![Message::user(prompt)], None).await?;
        Ok(self.settings.budget.truncate(&fused, self.settings.fuse_cap_tokens))
    }

    /// Re-asks once, in the same conversation, for an answer near the target length.
    async fn correct_length(
        &self,
        item: &Item,
        prompt: String,
        previous: &str,
        image: Option<&ImagePayload>,
    ) -> Result<String> {
        let correction = self.templates.render(
            TemplateName::LengthCorrection,
            &[
                ("target_words", &self.target()),
                ("actual_words", &word_count(previous).to_string()),
            ],
        );
        let messages = vec![Message::user(prompt), Message::assistant(previous), Message::user(correction)];
        self.ask(item, messages, image).await
    }

    pub async fn summarize_item(&self, item: &Item, mode: SummaryMode) -> Result<ItemSummary> {
        let mut warnings = Vec::new();
        let image_available = item
            .image_ref
            .as_deref()
            .is_some_and(ImagePayload::reference_exists);

        let mode = match mode {
            SummaryMode::Full if !image_available => match self.settings.missing_image {
                MissingImagePolicy::Fallback => {
                    let warning = format!("item {}: image missing, summarized from text only", item.item_id);
                    tracing::warn!("{warning}");
                    warnings.push(warning);
                    SummaryMode::TextOnly
                }
                MissingImagePolicy::Error => {
                    return Err(Error::Image {
                        item_id: item.item_id.clone(),
                        message: format!("image missing ({:?})", item.image_ref),
                    })
                }
            },
            other => other,
        };

        if mode == SummaryMode::TextOnly {
            let text_summary = non_empty_or(self.summarize_text(item).await?, item, &mut warnings);
            return Ok(ItemSummary {
                item_id: item.item_id.clone(),
                unified_summary: text_summary.clone(),
                text_summary,
                image_description: None,
                mode,
                warnings,
            });
        }

        let image = self.load_image(item).await?;

        if self.settings.single_call {
            let prompt = self.templates.render(
                TemplateName::SingleCall,
                &[("description", &item.description), ("target_words", &self.target())],
            );
            let unified = self.ask(item, vec![Message::user(prompt)], Some(&image)).await?;
            let unified = non_empty_or(unified, item, &mut warnings);
            let unified = self.settings.budget.truncate(&unified, self.settings.fuse_cap_tokens);
            return Ok(ItemSummary {
                item_id: item.item_id.clone(),
                text_summary: unified.clone(),
                image_description: None,
                unified_summary: unified,
                mode,
                warnings,
            });
        }

        let mut text_summary = non_empty_or(self.summarize_text(item).await?, item, &mut warnings);
        let mut image_description = self.describe_loaded(item, &image).await?;
        if image_description.is_empty() {
            warnings.push(format!("item {}: empty image description", item.item_id));
            image_description = "(no visual details)".to_string();
        }

        if length_gap(&text_summary, &image_description) > self.settings.length_tolerance {
            let target = self.settings.target_words as i64;
            let off = |s: &str| (word_count(s) as i64 - target).abs();
            if off(&text_summary) >= off(&image_description) {
                let redo = self
                    .correct_length(item, self.text_prompt(item), &text_summary, None)
                    .await?;
                if !redo.is_empty() {
                    text_summary = redo;
                }
            } else {
                let redo = self
                    .correct_length(item, self.image_prompt(), &image_description, Some(&image))
                    .await?;
                if !redo.is_empty() {
                    image_description = redo;
                }
            }
            let gap = length_gap(&text_summary, &image_description);
            if gap > self.settings.length_tolerance {
                let warning = format!(
                    "item {}: modality summaries differ in length by {:.2} after re-prompt",
                    item.item_id, gap
                );
                tracing::warn!("{warning}");
                warnings.push(warning);
            }
        }

        let unified_summary = self.fuse(item, &text_summary, &image_description).await?;
        let unified_summary = non_empty_or(unified_summary, item, &mut warnings);
        Ok(ItemSummary {
            item_id: item.item_id.clone(),
            text_summary,
            image_description: Some(image_description),
            unified_summary,
            mode,
            warnings,
        })
    }

    /// Summarizes every item, `concurrency` at a time; output keeps input order.
    pub async fn summarize_all(&self, items: &[Item], mode: SummaryMode, concurrency: usize) -> Result<Vec<ItemSummary>> {
        futures::stream::iter(items)
            .map(|item| self.summarize_item(item, mode))
            .buffered(concurrency.max(1))
            .try_collect()
            .await
    }
}

/// Falls back to the raw description when a backend answers with nothing.
fn non_empty_or(text: String, item: &Item, warnings: &mut Vec<String>) -> String {
    if text.trim().is_empty() {
        warnings.push(format!("item {}: empty generation, using raw description", item.item_id));
        item.description.trim().to_string()
    } else {
        text
    }
}

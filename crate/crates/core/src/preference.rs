//! User preference inference from chronologically ordered item summaries.
//!
//! Recurrent mode splits the history into blocks of `block_size` items: the
//! first block produces an initial preference summary and every later block
//! updates the previous summary. Direct mode summarizes the whole history in
//! one prompt. Every prompt is kept within `max_prompt_tokens`.

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::budget::TokenBudget;
use crate::error::{Error, Result};
use crate::gateway::{CompletionOptions, CompletionRequest, Gateway, Message, RoleTag};
use crate::templates::{TemplateName, Templates};

/// Previous summaries are never cut below this many estimated tokens.
pub const MIN_PREVIOUS_TOKENS: usize = 32;

/// Rough characters per English word, used to turn token room into a word target.
const CHARS_PER_WORD: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMode {
    Recurrent,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSettings {
    pub mode: PreferenceMode,
    pub block_size: usize,
    /// Target words per preference summary.
    pub summary_length: usize,
    pub max_prompt_tokens: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    pub budget: TokenBudget,
}

impl Default for PreferenceSettings {
    fn default() -> Self {
        PreferenceSettings {
            mode: PreferenceMode::Recurrent,
            block_size: 3,
            summary_length: 200,
            max_prompt_tokens: 512,
            max_tokens: 512,
            temperature: 0.0,
            budget: TokenBudget::default(),
        }
    }
}

impl PreferenceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        if self.summary_length < 1 {
            return Err(Error::Config("summary_length must be >= 1".into()));
        }
        if self.max_prompt_tokens < 2 * MIN_PREVIOUS_TOKENS {
            return Err(Error::Config(format!(
                "max_prompt_tokens must be >= {}",
                2 * MIN_PREVIOUS_TOKENS
            )));
        }
        Ok(())
    }
}

/// Consecutive blocks of at most `block_size` items, in order.
pub fn segment_blocks<T>(items: &[T], block_size: usize) -> Result<Vec<&[T]>> {
    if block_size < 1 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    Ok(items.chunks(block_size).collect())
}

/// Preference calls a history of `n` items needs (compressions excluded).
pub fn expected_calls(n: usize, block_size: usize, mode: PreferenceMode) -> usize {
    match mode {
        _ if n == 0 => 0,
        PreferenceMode::Recurrent => n.div_ceil(block_size),
        PreferenceMode::Direct => 1,
    }
}

/// A user's preference after consuming some prefix of their blocks. Only
/// produced by [`PreferenceInferer`]; updating yields a new state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceState {
    user_id: String,
    summary: String,
    blocks_consumed: usize,
    items_consumed: usize,
}

impl PreferenceState {
    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn summary(&self) -> &str {
        &self.summary
    }

    pub fn blocks_consumed(&self) -> usize {
        self.blocks_consumed
    }

    pub fn items_consumed(&self) -> usize {
        self.items_consumed
    }
}

/// Budget bookkeeping for one prompt or one user.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetTrace {
    pub calls: usize,
    pub compressions: usize,
    pub previous_truncations: usize,
    pub item_truncations: usize,
}

impl BudgetTrace {
    fn add(&mut self, other: BudgetTrace) {
        self.calls += other.calls;
        self.compressions += other.compressions;
        self.previous_truncations += other.previous_truncations;
        self.item_truncations += other.item_truncations;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPreference {
    pub user_id: String,
    pub preference: String,
    pub mode: PreferenceMode,
    pub items: usize,
    pub blocks: usize,
    #[serde(flatten)]
    pub trace: BudgetTrace,
}

pub struct PreferenceInferer<'a> {
    gateway: &'a Gateway,
    templates: &'a Templates,
    settings: PreferenceSettings,
}

impl<'a> PreferenceInferer<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates, settings: PreferenceSettings) -> Result<Self> {
        settings.validate()?;
        Ok(PreferenceInferer { gateway, templates, settings })
    }

    pub fn settings(&self) -> &PreferenceSettings {
        &self.settings
    }

    fn budget(&self) -> &TokenBudget {
        &self.settings.budget
    }

    async fn ask(&self, user_id: &str, prompt: String) -> Result<String> {
        let request = CompletionRequest::new(RoleTag::PreferenceLlm, vec![Message::user(prompt)])
            .with_options(CompletionOptions {
                max_tokens: self.settings.max_tokens,
                temperature: self.settings.temperature,
                ..Default::default()
            })
            .with_subject(Some(user_id), None);
        let result = self
            .gateway
            .complete(&request)
            .await
            .map_err(|e| e.context(format!("user {user_id}")))?;
        let text = result.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::Transport(format!("user {user_id}: empty preference summary")));
        }
        Ok(text)
    }

    fn render(&self, name: TemplateName, previous: &str, items: &str) -> String {
        self.templates.render(
            name,
            &[
                ("summary_length", &self.settings.summary_length.to_string()),
                ("previous_preference", previous),
                ("item_summaries", items),
            ],
        )
    }

    /// Renders `name`, cutting item summaries evenly until the prompt fits.
    fn fit_items(&self, name: TemplateName, previous: &str, items: &[&str], trace: &mut BudgetTrace) -> Result<String> {
        let max = self.settings.max_prompt_tokens;
        let prompt = self.render(name, previous, &format_items(items));
        if self.budget().estimate(&prompt) <= max {
            return Ok(prompt);
        }
        let fixed = self.budget().estimate(&self.render(name, previous, ""));
        let mut per_item = max.saturating_sub(fixed) / items.len().max(1);
        while per_item > 0 {
            let cut: Vec<String> = items.iter().map(|s| self.budget().truncate(s, per_item)).collect();
            let cut: Vec<&str> = cut.iter().map(String::as_str).collect();
            let prompt = self.render(name, previous, &format_items(&cut));
            if self.budget().estimate(&prompt) <= max {
                trace.item_truncations += 1;
                return Ok(prompt);
            }
            per_item -= 1;
        }
        Err(Error::Precondition(format!(
            "template {name} leaves no room for item summaries within {max} tokens"
        )))
    }

    /// Initial summary from the first block.
    pub async fn infer_initial(&self, user_id: &str, block: &[&str]) -> Result<(PreferenceState, BudgetTrace)> {
        if block.is_empty() {
            return Err(Error::Precondition(format!("user {user_id}: empty first block")));
        }
        let mut trace = BudgetTrace::default();
        let prompt = self.fit_items(TemplateName::InitialPreference, "", block, &mut trace)?;
        let summary = self.ask(user_id, prompt).await?;
        trace.calls += 1;
        let state = PreferenceState {
            user_id: user_id.to_string(),
            summary,
            blocks_consumed: 1,
            items_consumed: block.len(),
        };
        Ok((state, trace))
    }

    /// Folds block number `block_index` (0-based) into `state`. Blocks must
    /// arrive in order.
    pub async fn infer_update(
        &self,
        state: &PreferenceState,
        block_index: usize,
        block: &[&str],
    ) -> Result<(PreferenceState, BudgetTrace)> {
        if block_index != state.blocks_consumed {
            return Err(Error::Sequencing(format!(
                "user {}: expected block {}, got block {block_index}",
                state.user_id, state.blocks_consumed
            )));
        }
        if block.is_empty() {
            return Err(Error::Precondition(format!("user {}: empty block {block_index}", state.user_id)));
        }
        let user_id = state.user_id.as_str();
        let name = TemplateName::UpdatePreference;
        let max = self.settings.max_prompt_tokens;
        let mut trace = BudgetTrace::default();
        let items = format_items(block);
        let mut previous = state.summary.clone();

        if self.budget().estimate(&self.render(name, &previous, &items)) > max {
            let room = max.saturating_sub(self.budget().estimate(&self.render(name, "", &items)));
            let room = room.max(MIN_PREVIOUS_TOKENS);
            let words = ((room as f64 * self.budget().chars_per_token / CHARS_PER_WORD) as usize).max(8);
            let prompt = self.templates.render(
                TemplateName::CompressPreference,
                &[("summary_length", &words.to_string()), ("previous_preference", &previous)],
            );
            previous = self.ask(user_id, prompt).await?;
            trace.compressions += 1;
            if self.budget().estimate(&previous) > room {
                previous = self.budget().truncate(&previous, room);
                trace.previous_truncations += 1;
            }
        }
        let prompt = self.fit_items(name, &previous, block, &mut trace)?;
        let summary = self.ask(user_id, prompt).await?;
        trace.calls += 1;
        let next = PreferenceState {
            user_id: state.user_id.clone(),
            summary,
            blocks_consumed: state.blocks_consumed + 1,
            items_consumed: state.items_consumed + block.len(),
        };
        Ok((next, trace))
    }

    /// Preference for one user from their item summaries, oldest first.
    pub async fn infer_preference(&self, user_id: &str, summaries: &[&str]) -> Result<UserPreference> {
        if summaries.is_empty() {
            return Err(Error::Precondition(format!("user {user_id}: empty history")));
        }
        let mut trace = BudgetTrace::default();
        let (preference, blocks) = match self.settings.mode {
            PreferenceMode::Direct => {
                let prompt = self.fit_items(TemplateName::DirectPreference, "", summaries, &mut trace)?;
                let preference = self.ask(user_id, prompt).await?;
                trace.calls += 1;
                (preference, 1)
            }
            PreferenceMode::Recurrent => {
                let blocks = segment_blocks(summaries, self.settings.block_size)?;
                let (mut state, t) = self.infer_initial(user_id, blocks[0]).await?;
                trace.add(t);
                for (index, block) in blocks.iter().enumerate().skip(1) {
                    let (next, t) = self.infer_update(&state, index, block).await?;
                    trace.add(t);
                    state = next;
                }
                debug_assert_eq!(state.items_consumed, summaries.len());
                (state.summary, blocks.len())
            }
        };
        Ok(UserPreference {
            user_id: user_id.to_string(),
            preference,
            mode: self.settings.mode,
            items: summaries.len(),
            blocks,
            trace,
        })
    }

    /// One preference per `(user_id, summaries)` pair, `concurrency` users at
    /// a time; output keeps input order.
    pub async fn infer_all(&self, users: &[(String, Vec<String>)], concurrency: usize) -> Result<Vec<UserPreference>> {
        futures::stream::iter(users)
            .map(|(user_id, summaries)| async move {
                let refs: Vec<&str> = summaries.iter().map(String::as_str).collect();
                self.infer_preference(user_id, &refs).await
            })
            .buffered(concurrency.max(1))
            .try_collect()
            .await
    }
}

fn format_items(items: &[&str]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

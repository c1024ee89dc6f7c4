//! Yes/no recommendation scoring.
//!
//! The recommender sees a user's preference summary and one candidate item
//! and is asked whether the user will interact with it. The score is the
//! normalized probability of "yes" against "no" on the first answer token,
//! `p = p_yes / (p_yes + p_no)`.

use std::collections::BTreeMap;

use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::budget::TokenBudget;
use crate::catalog::Item;
use crate::error::{Error, Result};
use crate::gateway::{CompletionOptions, CompletionRequest, Gateway, ImagePayload, Message, RoleTag};
use crate::templates::{TemplateName, Templates};

/// Mass given to a polarity that is absent from the returned top-K.
pub const FLOOR: f64 = 1e-6;

pub const ANSWER_CONSTRAINT: &str = "Answer with only \"yes\" or \"no\".";

pub const DEFAULT_SYSTEM_INSTRUCTION: &str =
    "You are a recommendation assistant. You judge whether a user will interact with an item.";

/// The preference is never cut below this many estimated tokens while the
/// candidate description still has room to give.
const MIN_PREFERENCE_TOKENS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorPolicy {
    /// Both polarities missing scores 0.5 (both floored).
    Neutral,
    /// Both polarities missing is an extraction error.
    Error,
}

/// Summed first-token masses of the yes and no variants. `None` when no
/// variant of that polarity was returned.
pub fn extract_yes_no(first_token_logprobs: &BTreeMap<String, f64>) -> (Option<f64>, Option<f64>) {
    let mut yes = None;
    let mut no = None;
    for (token, lp) in first_token_logprobs {
        let slot = match token.trim().to_lowercase().as_str() {
            "yes" => &mut yes,
            "no" => &mut no,
            _ => continue,
        };
        *slot = Some(slot.unwrap_or(0.0) + lp.exp());
    }
    (yes, no)
}

/// Normalized yes-probability. Both masses must be positive.
///
/// The quotient is taken against the exact sum (its rounding error is
/// recovered and folded back), so e.g. `(0.6, 0.2)` gives exactly 0.75
/// where the plain `y / (y + n)` lands one ulp low.
pub fn yes_probability(p_yes: f64, p_no: f64) -> f64 {
    debug_assert!(p_yes > 0.0 && p_no > 0.0);
    let sum = p_yes + p_no;
    let b = sum - p_yes;
    let sum_err = (p_yes - (sum - b)) + (p_no - b);
    let q = p_yes / sum;
    let residual = (-q).mul_add(sum, p_yes) - q * sum_err;
    q + residual / sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YesNoScore {
    pub p: f64,
    pub p_yes: f64,
    pub p_no: f64,
    pub floor_applied: bool,
}

pub fn score_logprobs(first_token_logprobs: &BTreeMap<String, f64>, policy: FloorPolicy) -> Result<YesNoScore> {
    let (yes, no) = extract_yes_no(first_token_logprobs);
    if yes.is_none() && no.is_none() && policy == FloorPolicy::Error {
        let seen: Vec<&str> = first_token_logprobs.keys().map(String::as_str).collect();
        return Err(Error::Extraction(format!("neither yes nor no among first tokens {seen:?}")));
    }
    let floor_applied = yes.is_none() || no.is_none();
    let p_yes = yes.unwrap_or(FLOOR).max(FLOOR);
    let p_no = no.unwrap_or(FLOOR).max(FLOOR);
    Ok(YesNoScore { p: yes_probability(p_yes, p_no), p_yes, p_no, floor_applied })
}

/// Sorts by score descending, ties broken by item id ascending.
pub fn rank_candidates(scores: &mut [(String, f64)]) {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderSettings {
    pub top_logprobs: u32,
    pub floor_policy: FloorPolicy,
    pub attach_image: bool,
    pub max_prompt_tokens: usize,
    pub system_instruction: String,
    pub temperature: f64,
    pub budget: TokenBudget,
}

impl Default for RecommenderSettings {
    fn default() -> Self {
        RecommenderSettings {
            top_logprobs: 20,
            floor_policy: FloorPolicy::Neutral,
            attach_image: true,
            max_prompt_tokens: 512,
            system_instruction: DEFAULT_SYSTEM_INSTRUCTION.to_string(),
            temperature: 0.0,
            budget: TokenBudget::default(),
        }
    }
}

/// System and user messages for one (preference, candidate) pair, with the
/// preference and then the description cut to fit `max_prompt_tokens`.
pub fn build_messages(
    templates: &Templates,
    settings: &RecommenderSettings,
    preference: &str,
    candidate: &Item,
) -> Result<Vec<Message>> {
    let budget = &settings.budget;
    let render = |pref: &str, desc: &str| {
        format!(
            "{}\n\n{ANSWER_CONSTRAINT}",
            templates.render(
                TemplateName::Recommend,
                &[("preference", pref), ("candidate_description", desc)]
            )
        )
    };
    let fixed = budget.estimate(&settings.system_instruction) + budget.estimate(&render("", ""));
    let max = settings.max_prompt_tokens;
    let room = max.checked_sub(fixed).filter(|r| *r >= 2).ok_or_else(|| {
        Error::Precondition(format!("recommendation template alone exceeds {max} tokens"))
    })?;

    let mut pref = preference.to_string();
    let mut desc = candidate.description.clone();
    if budget.estimate(&pref) + budget.estimate(&desc) > room {
        let pref_room = room
            .saturating_sub(budget.estimate(&desc))
            .max(MIN_PREFERENCE_TOKENS.min(room / 2));
        pref = budget.truncate(&pref, pref_room);
        let desc_room = room.saturating_sub(budget.estimate(&pref));
        desc = budget.truncate(&desc, desc_room);
        tracing::debug!(item = %candidate.item_id, "recommendation prompt truncated to fit {max} tokens");
    }
    Ok(vec![Message::system(settings.system_instruction.clone()), Message::user(render(&pref, &desc))])
}

/// Estimated size of a message list.
pub fn prompt_tokens(budget: &TokenBudget, messages: &[Message]) -> usize {
    messages.iter().map(|m| budget.estimate(&m.text)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub user_id: String,
    pub item_id: String,
    #[serde(flatten)]
    pub score: YesNoScore,
}

pub struct Recommender<'a> {
    gateway: &'a Gateway,
    templates: &'a Templates,
    settings: RecommenderSettings,
}

impl<'a> Recommender<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a Templates, settings: RecommenderSettings) -> Result<Self> {
        if settings.top_logprobs < 1 {
            return Err(Error::Config("top_logprobs must be >= 1".into()));
        }
        Ok(Recommender { gateway, templates, settings })
    }

    pub fn settings(&self) -> &RecommenderSettings {
        &self.settings
    }

    /// The candidate image, when attaching is enabled and it exists.
    pub async fn candidate_image(&self, candidate: &Item) -> Result<Option<ImagePayload>> {
        match candidate.image_ref.as_deref() {
            Some(r) if self.settings.attach_image && ImagePayload::reference_exists(r) => {
                Ok(Some(ImagePayload::load(&candidate.item_id, r).await?))
            }
            _ => Ok(None),
        }
    }

    pub async fn request(&self, user_id: &str, preference: &str, candidate: &Item) -> Result<CompletionRequest> {
        let messages = build_messages(self.templates, &self.settings, preference, candidate)?;
        let mut request = CompletionRequest::new(RoleTag::RecommenderMllm, messages)
            .with_options(CompletionOptions {
                max_tokens: 1,
                temperature: self.settings.temperature,
                top_logprobs: self.settings.top_logprobs,
                teacher_forced_completion: None,
            })
            .with_subject(Some(user_id), Some(&candidate.item_id));
        if let Some(image) = self.candidate_image(candidate).await? {
            request = request.with_image(image);
        }
        Ok(request)
    }

    pub async fn score(&self, user_id: &str, preference: &str, candidate: &Item) -> Result<CandidateScore> {
        let request = self.request(user_id, preference, candidate).await?;
        let result = self.gateway.complete(&request).await?;
        let score = score_logprobs(&result.first_token_logprobs, self.settings.floor_policy)
            .map_err(|e| e.context(format!("user {user_id}, item {}", candidate.item_id)))?;
        Ok(CandidateScore {
            user_id: user_id.to_string(),
            item_id: candidate.item_id.clone(),
            score,
        })
    }

    /// Scores every candidate, `concurrency` at a time, in input order.
    pub async fn score_candidates(
        &self,
        user_id: &str,
        preference: &str,
        candidates: &[&Item],
        concurrency: usize,
    ) -> Result<Vec<CandidateScore>> {
        futures::stream::iter(candidates)
            .map(|item| self.score(user_id, preference, item))
            .buffered(concurrency.max(1))
            .try_collect()
            .await
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::gateway::{MockBackend, MockBehavior, RetryPolicy};

    fn lps(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        entries.iter().map(|(t, p)| (t.to_string(), p.ln())).collect()
    }

    #[test]
    fn quotient_is_correctly_rounded() {
        // Reference values from exact rational arithmetic.
        assert_eq!(yes_probability(0.6, 0.2), 0.75);
        assert_eq!(yes_probability(0.1, 0.7), 0.125);
        assert_eq!(yes_probability(0.3, 0.6), 0.3333333333333333);
        assert_eq!(yes_probability(1e-6, 0.9), 1.1111098765445815e-06);
        assert_eq!(yes_probability(0.35, 0.05), 0.875);
    }

    #[test]
    fn normalizes_yes_against_no() {
        let s = score_logprobs(&lps(&[("yes", 0.6), ("no", 0.2)]), FloorPolicy::Neutral).unwrap();
        assert!((s.p - 0.75).abs() < 1e-9);
        assert!(!s.floor_applied);
        let s = score_logprobs(&lps(&[("yes", 0.3), ("no", 0.3)]), FloorPolicy::Neutral).unwrap();
        assert!((s.p - 0.5).abs() < 1e-9);
    }

    #[test]
    fn token_variants_are_summed() {
        let s = score_logprobs(
            &lps(&[("Yes", 0.4), (" yes", 0.1), ("YES", 0.1), ("No", 0.2), ("maybe", 0.2)]),
            FloorPolicy::Neutral,
        )
        .unwrap();
        assert!((s.p_yes - 0.6).abs() < 1e-12);
        assert!((s.p - 0.75).abs() < 1e-9);
        // Words merely containing yes/no do not count.
        let (yes, no) = extract_yes_no(&lps(&[("yesterday", 0.5), ("none", 0.5)]));
        assert_eq!((yes, no), (None, None));
    }

    #[test]
    fn missing_polarity_is_floored() {
        let s = score_logprobs(&lps(&[("yes", 0.9)]), FloorPolicy::Neutral).unwrap();
        assert!(s.floor_applied);
        assert!((s.p - 0.9 / (0.9 + FLOOR)).abs() < 1e-12);
        let s = score_logprobs(&lps(&[("no", 0.9)]), FloorPolicy::Error).unwrap();
        assert!(s.floor_applied && s.p < 1e-5);

        let none = lps(&[("maybe", 0.9)]);
        let s = score_logprobs(&none, FloorPolicy::Neutral).unwrap();
        assert!((s.p - 0.5).abs() < 1e-12 && s.floor_applied);
        assert!(matches!(score_logprobs(&none, FloorPolicy::Error), Err(Error::Extraction(_))));
    }

    #[test]
    fn ranking_breaks_ties_by_item_id() {
        let mut scores = vec![("b".to_string(), 0.5), ("c".into(), 0.9), ("a".into(), 0.5)];
        rank_candidates(&mut scores);
        let order: Vec<&str> = scores.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    proptest! {
        #[test]
        fn probability_is_in_unit_interval(a in 1e-12f64..1.0, b in 1e-12f64..1.0) {
            let p = yes_probability(a, b);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn probability_is_monotone_in_yes(a in 1e-6f64..1.0, d in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assert!(yes_probability(a + d, b) >= yes_probability(a, b));
        }

        #[test]
        fn swapping_masses_complements(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
            prop_assert!((yes_probability(a, b) + yes_probability(b, a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn common_scale_cancels(a in 1e-6f64..1.0, b in 1e-6f64..1.0, c in 1e-3f64..1e3) {
            prop_assert!((yes_probability(c * a, c * b) - yes_probability(a, b)).abs() < 1e-12);
        }
    }

    #[test]
    fn prompts_fit_the_budget() {
        let templates = Templates::default();
        let settings = RecommenderSettings::default();
        let item = Item::new("i1", "gadget ".repeat(2000));
        let pref = "likes things ".repeat(1000);
        let messages = build_messages(&templates, &settings, &pref, &item).unwrap();
        assert!(prompt_tokens(&settings.budget, &messages) <= settings.max_prompt_tokens);
        assert!(messages[1].text.contains("likes things"));
        assert!(messages[1].text.contains("gadget"));
        assert!(messages[1].text.ends_with(ANSWER_CONSTRAINT));

        let short = build_messages(&templates, &settings, "likes tea", &Item::new("i", "a teapot")).unwrap();
        assert!(short[1].text.contains("likes tea") && short[1].text.contains("a teapot"));

        let tiny = RecommenderSettings { max_prompt_tokens: 10, ..Default::default() };
        assert!(build_messages(&templates, &tiny, "x", &item).is_err());
    }

    #[tokio::test]
    async fn oracle_mock_separates_positives() {
        let mock = MockBackend::new(1, MockBehavior::oracle_yes(1.0, [("u1".to_string(), "pos".to_string())]));
        let gw = Gateway::builder()
            .single(Arc::new(mock), 4, RetryPolicy::default())
            .build()
            .unwrap();
        let templates = Templates::default();
        let rec = Recommender::new(&gw, &templates, RecommenderSettings::default()).unwrap();
        let pos = Item::new("pos", "a thing");
        let neg = Item::new("neg", "a thing");
        let scores = rec.score_candidates("u1", "likes things", &[&neg, &pos], 2).await.unwrap();
        assert_eq!(scores[0].item_id, "neg");
        assert!(scores[1].score.p > 0.99 && scores[0].score.p < 0.01);
        assert!(scores.iter().all(|s| s.score.floor_applied));
    }
}

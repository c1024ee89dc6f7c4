//! Tokenizer-agnostic length budgeting.
//!
//! Backends use different tokenizers, so prompt and output lengths are
//! estimated from character counts (default 4 characters per token).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub chars_per_token: f64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget { chars_per_token: 4.0 }
    }
}

impl TokenBudget {
    pub fn new(chars_per_token: f64) -> Self {
        assert!(chars_per_token > 0.0, "chars_per_token must be positive");
        TokenBudget { chars_per_token }
    }

    pub fn estimate(&self, text: &str) -> usize {
        (text.chars().count() as f64 / self.chars_per_token).ceil() as usize
    }

    /// Longest prefix whose estimate fits `max_tokens`, cut at the last word
    /// boundary when one exists inside the allowance.
    pub fn truncate(&self, text: &str, max_tokens: usize) -> String {
        if self.estimate(text) <= max_tokens {
            return text.to_string();
        }
        let max_chars = (max_tokens as f64 * self.chars_per_token).floor() as usize;
        let cut = text
            .char_indices()
            .nth(max_chars)
            .map(|(i, _)| i)
            .unwrap_or(text.len());
        let head = &text[..cut];
        let head = match head.rfind(char::is_whitespace) {
            Some(ws) if ws > 0 => &head[..ws],
            _ => head,
        };
        head.trim_end().to_string()
    }
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn estimates_round_up() {
        let b = TokenBudget::default();
        assert_eq!(b.estimate(""), 0);
        assert_eq!(b.estimate("abcd"), 1);
        assert_eq!(b.estimate("abcde"), 2);
        assert_eq!(TokenBudget::new(2.0).estimate("abcde"), 3);
    }

    #[test]
    fn truncation_prefers_word_boundaries() {
        let b = TokenBudget::default();
        let text = "alpha beta gamma delta epsilon";
        let cut = b.truncate(text, 3);
        assert_eq!(cut, "alpha beta");
        assert_eq!(b.truncate("short", 10), "short");
    }

    proptest! {
        #[test]
        fn truncation_respects_budget(text in "[a-z ]{0,400}", cap in 0usize..60) {
            let b = TokenBudget::default();
            let cut = b.truncate(&text, cap);
            prop_assert!(b.estimate(&cut) <= cap);
            prop_assert!(text.starts_with(&cut));
        }

        #[test]
        fn truncation_handles_multibyte(text in "\\PC{0,200}", cap in 0usize..40) {
            let b = TokenBudget::new(3.0);
            let cut = b.truncate(&text, cap);
            prop_assert!(b.estimate(&cut) <= cap);
        }
    }
}

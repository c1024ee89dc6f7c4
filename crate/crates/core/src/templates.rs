//! Prompt templates with `{placeholder}` substitution.
//!
//! Defaults are compiled in; any template can be replaced by a text file.
//! Templates put the instruction in the first paragraph and the data in the
//! following blank-line separated paragraphs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    TextSummary,
    ImageDescription,
    Fusion,
    SingleCall,
    LengthCorrection,
    InitialPreference,
    UpdatePreference,
    DirectPreference,
    CompressPreference,
    Recommend,
}

impl TemplateName {
    pub const ALL: [TemplateName; 10] = [
        TemplateName::TextSummary,
        TemplateName::ImageDescription,
        TemplateName::Fusion,
        TemplateName::SingleCall,
        TemplateName::LengthCorrection,
        TemplateName::InitialPreference,
        TemplateName::UpdatePreference,
        TemplateName::DirectPreference,
        TemplateName::CompressPreference,
        TemplateName::Recommend,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::TextSummary => "text_summary.txt",
            TemplateName::ImageDescription => "image_description.txt",
            TemplateName::Fusion => "fusion.txt",
            TemplateName::SingleCall => "single_call.txt",
            TemplateName::LengthCorrection => "length_correction.txt",
            TemplateName::InitialPreference => "initial_preference.txt",
            TemplateName::UpdatePreference => "update_preference.txt",
            TemplateName::DirectPreference => "direct_preference.txt",
            TemplateName::CompressPreference => "compress_preference.txt",
            TemplateName::Recommend => "recommend.txt",
        }
    }

    /// Placeholders a usable template must contain.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::TextSummary => &["description", "target_words"],
            TemplateName::ImageDescription => &["target_words"],
            TemplateName::Fusion => &["text_summary", "image_description", "target_words"],
            TemplateName::SingleCall => &["description", "target_words"],
            TemplateName::LengthCorrection => &["target_words"],
            TemplateName::InitialPreference => &["item_summaries"],
            TemplateName::UpdatePreference => &["previous_preference", "item_summaries"],
            TemplateName::DirectPreference => &["item_summaries"],
            TemplateName::CompressPreference => &["previous_preference"],
            TemplateName::Recommend => &["preference", "candidate_description"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateName::TextSummary => {
                "Summarize the item description below in about {target_words} words. Keep the \
                 attributes a user would weigh when deciding to engage with it: topic, genre, \
                 style, function and audience.\n\nDescription:\n{description}"
            }
            TemplateName::ImageDescription => {
                "Please summarize the image in about {target_words} words. Describe its subject, \
                 colors, composition, visual style and any visible text."
            }
            TemplateName::Fusion => {
                "Below are a text summary and an image description of the same item. Merge them \
                 into one unified item profile of about {target_words} words that keeps the key \
                 information from both.\n\nText summary:\n{text_summary}\n\nImage description:\n\
                 {image_description}"
            }
            TemplateName::SingleCall => {
                "Using both the attached image and the description below, write one unified item \
                 profile of about {target_words} words.\n\nDescription:\n{description}"
            }
            TemplateName::LengthCorrection => {
                "Your previous answer had {actual_words} words. Answer again in about \
                 {target_words} words."
            }
            TemplateName::InitialPreference => {
                "The following items are the first interactions of a user, in chronological \
                 order. Summarize the user's initial interests in about {summary_length} words.\
                 \n\nItems:\n{item_summaries}"
            }
            TemplateName::UpdatePreference => {
                "Here is a summary of a user's preferences so far, followed by the items the user \
                 interacted with next, in chronological order. Update the preference summary to \
                 reflect how the user's interests are evolving, in about {summary_length} words.\
                 \n\nPrevious preference summary:\n{previous_preference}\n\nNew items:\n\
                 {item_summaries}"
            }
            TemplateName::DirectPreference => {
                "The following items are a user's full interaction history, in chronological \
                 order. Summarize the user's preferences in about {summary_length} words.\n\n\
                 Items:\n{item_summaries}"
            }
            TemplateName::CompressPreference => {
                "Condense the user preference summary below to about {summary_length} words, \
                 keeping the most recent and most consistent interests.\n\nPreference summary:\n\
                 {previous_preference}"
            }
            TemplateName::Recommend => {
                "Decide whether the user described below will interact with the candidate item \
                 shown in the image.\n\nUser preference:\n{preference}\n\nCandidate item:\n\
                 {candidate_description}"
            }
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

impl FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown template name {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Templates {
    texts: BTreeMap<TemplateName, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            texts: TemplateName::ALL
                .into_iter()
                .map(|t| (t, t.default_text().to_string()))
                .collect(),
        }
    }
}

impl Templates {
    /// Defaults, then files from `dir` (when present), then explicit per-name
    /// overrides. Explicitly referenced files must exist.
    pub fn load(dir: Option<&PathBuf>, overrides: &BTreeMap<String, PathBuf>) -> Result<Self> {
        let mut templates = Templates::default();
        if let Some(dir) = dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("template directory {} does not exist", dir.display())));
            }
            for name in TemplateName::ALL {
                let path = dir.join(name.file_name());
                if path.is_file() {
                    templates.set(name, std::fs::read_to_string(&path)?)?;
                }
            }
        }
        for (name, path) in overrides {
            let name: TemplateName = name.parse()?;
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("template {name}: cannot read {}: {e}", path.display()))
            })?;
            templates.set(name, text)?;
        }
        Ok(templates)
    }

    pub fn set(&mut self, name: TemplateName, text: impl Into<String>) -> Result<()> {
        let text = text.into();
        for placeholder in name.required_placeholders() {
            if !text.contains(&format!("{{{placeholder}}}")) {
                return Err(Error::Config(format!(
                    "template {name} is missing the {{{placeholder}}} placeholder"
                )));
            }
        }
        self.texts.insert(name, text);
        Ok(())
    }

    pub fn text(&self, name: TemplateName) -> &str {
        &self.texts[&name]
    }

    pub fn render(&self, name: TemplateName, values: &[(&str, &str)]) -> String {
        render(self.text(name), values)
    }

    /// Hash over the subset of templates a stage depends on.
    pub fn fingerprint_of(&self, names: &[TemplateName]) -> String {
        let subset: BTreeMap<_, _> = names.iter().map(|n| (*n, self.text(*n))).collect();
        fingerprint(&subset)
    }
}

/// Single-pass substitution: values are inserted verbatim, so braces inside a
/// value are never expanded. Unknown placeholders are left as they are.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

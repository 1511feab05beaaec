//! Prompt strategies P1–P4 and text elaboration.

mod keywords;
mod rewriter;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{truncate_text, TextSample, Tokenizer};
use crate::util::{read_jsonl, write_jsonl};

pub use keywords::{extract_keywords, PosTag, PosTagger, STOPWORDS};
pub use rewriter::{
    CachedRewriter, HttpRewriter, HttpRewriterConfig, RewriteRequest, StubRewriter, TextRewriter,
};

/// Attached to every prompt.
pub const NEGATIVE_PROMPT: &str =
    "text, watermark, low quality, cartoon, blurry, ugly, disfigured, deformed, jpeg artifacts";

/// System prompt for `ElaborationMode::ImagePrompt`.
pub const ARTIST_SYSTEM_PROMPT: &str = "You are an expert visual artist and photographer. Your task is to read the provided text and imagine a single, high-fidelity image that captures the core essence, entities, and atmosphere of the text. Describe this image in a detailed, comma-separated list of visual attributes, focusing on:
1. Subject (Who/What is in the center?)
2. Action/State (What is happening?)
3. Setting/Background (Where is it?)
4. Lighting/Style (e.g., 'cinematic lighting', 'photorealistic', 'dark and moody').
Do NOT output any conversational text. Output ONLY the visual description prompt.";

/// System prompt for `ElaborationMode::VisualDescription`.
pub const WRITER_SYSTEM_PROMPT: &str = "You are an expert descriptive writer. Read the following text and provide a detailed, vivid visual description of the scene, objects, or atmosphere implied by the text. Your description should clarify any visual ambiguities and set the scene. Output ONLY the descriptive paragraph. Do not explain your reasoning.";

pub const DEFAULT_KEYWORD_TEMPLATE: &str = "A photorealistic, high-quality image of {keywords}.";
pub const DEFAULT_STYLE_TEMPLATE: &str = " Style: {style}.";
pub const DEFAULT_MAX_KEYWORDS: usize = 8;
/// Token budget for P1/P4 input text.
pub const DEFAULT_PROMPT_TOKENS: usize = 77;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("text is empty")]
    EmptyText,
    #[error("no visual content in text")]
    NoVisualContent,
    #[error("unknown prompt strategy `{0}`")]
    UnknownStrategy(String),
    #[error("strategy P4 needs a text rewriter")]
    MissingElaborator,
    #[error("task `{0}` has no style lexicon entry")]
    LexiconMiss(String),
    #[error("invalid prompt config: {0}")]
    Config(String),
    #[error("rewriter `{client}` failed after {attempts} attempt(s): {message}")]
    Client {
        client: String,
        attempts: u32,
        message: String,
    },
    #[error("rewriter `{0}` returned an empty rewrite")]
    EmptyRewrite(String),
    #[error("duplicate prompt for sample `{0}` strategy {1}")]
    Duplicate(String, Strategy),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PromptError {
    /// Worth retrying later; the others are deterministic.
    pub fn is_retriable(&self) -> bool {
        matches!(self, PromptError::Client { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    P1,
    P2,
    P3,
    P4,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::P1, Strategy::P2, Strategy::P3, Strategy::P4];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::P1 => "P1",
            Strategy::P2 => "P2",
            Strategy::P3 => "P3",
            Strategy::P4 => "P4",
        })
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(Strategy::P1),
            "P2" => Ok(Strategy::P2),
            "P3" => Ok(Strategy::P3),
            "P4" => Ok(Strategy::P4),
            _ => Err(PromptError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub sample_id: String,
    pub strategy: Strategy,
    pub positive: String,
    pub negative: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub style_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elaborator_id: Option<String>,
    /// Set when P2/P3 found no keywords and fell back to the P1 text.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// Style tags per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleLexicon {
    tasks: BTreeMap<String, Vec<String>>,
}

impl StyleLexicon {
    pub fn new(tasks: BTreeMap<String, Vec<String>>) -> Result<Self, PromptError> {
        let lex = Self { tasks };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (task, tags) in &self.tasks {
            if tags.is_empty() {
                return Err(PromptError::Config(format!(
                    "task `{task}` has no style tags"
                )));
            }
            if tags.iter().any(|t| t.trim().is_empty()) {
                return Err(PromptError::Config(format!(
                    "task `{task}` has an empty style tag"
                )));
            }
        }
        Ok(())
    }

    pub fn tags(&self, task_id: &str) -> Option<&[String]> {
        self.tasks.get(task_id).map(Vec::as_slice)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }
}

impl Default for StyleLexicon {
    fn default() -> Self {
        let mut tasks = BTreeMap::new();
        tasks.insert(
            "sentiment".to_string(),
            vec![
                "vibrant".to_string(),
                "warmly lit".to_string(),
                "mood lighting conveying positive or negative sentiment".to_string(),
            ],
        );
        tasks.insert(
            "news".to_string(),
            vec![
                "in the style of a news report".to_string(),
                "professional journalistic photography aesthetic".to_string(),
            ],
        );
        Self { tasks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElaborationMode {
    ImagePrompt,
    VisualDescription,
}

impl ElaborationMode {
    pub fn system_prompt(self) -> &'static str {
        match self {
            ElaborationMode::ImagePrompt => ARTIST_SYSTEM_PROMPT,
            ElaborationMode::VisualDescription => WRITER_SYSTEM_PROMPT,
        }
    }
}

/// Sends `text` to the rewriter under the mode's system prompt at
/// temperature 0 and returns the trimmed reply.
pub fn elaborate_text(
    text: &str,
    mode: ElaborationMode,
    client: &dyn TextRewriter,
) -> Result<String, PromptError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(PromptError::EmptyText);
    }
    let request = RewriteRequest {
        system: mode.system_prompt().to_string(),
        user: text.to_string(),
        model_id: client.model_id().to_string(),
        temperature: 0.0,
    };
    let reply = client.rewrite(&request)?;
    let reply = reply.trim();
    log::debug!(
        "rewriter {} ({mode:?}): {:?} -> {:?}",
        client.id(),
        request.user,
        reply
    );
    if reply.is_empty() {
        return Err(PromptError::EmptyRewrite(client.id().to_string()));
    }
    Ok(reply.to_string())
}

/// Settings shared by all prompt builds of a run.
pub struct PromptContext<'a> {
    pub task_id: &'a str,
    pub lexicon: &'a StyleLexicon,
    pub tagger: Option<&'a dyn PosTagger>,
    pub tokenizer: &'a dyn Tokenizer,
    pub token_limit: usize,
    pub max_keywords: usize,
    pub keyword_template: &'a str,
    pub style_template: &'a str,
    pub elaborator: Option<&'a dyn TextRewriter>,
}

impl<'a> PromptContext<'a> {
    pub fn new(task_id: &'a str, lexicon: &'a StyleLexicon, tokenizer: &'a dyn Tokenizer) -> Self {
        Self {
            task_id,
            lexicon,
            tagger: None,
            tokenizer,
            token_limit: DEFAULT_PROMPT_TOKENS,
            max_keywords: DEFAULT_MAX_KEYWORDS,
            keyword_template: DEFAULT_KEYWORD_TEMPLATE,
            style_template: DEFAULT_STYLE_TEMPLATE,
            elaborator: None,
        }
    }
}

pub fn build_prompt(
    sample: &TextSample,
    strategy: Strategy,
    ctx: &PromptContext<'_>,
) -> Result<PromptSpec, PromptError> {
    let direct = truncate_text(sample.text.trim(), ctx.token_limit, ctx.tokenizer);
    if direct.is_empty() {
        return Err(PromptError::EmptyText);
    }
    let mut spec = PromptSpec {
        sample_id: sample.id.clone(),
        strategy,
        positive: direct.clone(),
        negative: NEGATIVE_PROMPT.to_string(),
        keywords: vec![],
        style_tags: vec![],
        elaborator_id: None,
        fallback: false,
    };
    match strategy {
        Strategy::P1 => {}
        Strategy::P2 | Strategy::P3 => {
            let style = if strategy == Strategy::P3 {
                let tags = ctx
                    .lexicon
                    .tags(ctx.task_id)
                    .ok_or_else(|| PromptError::LexiconMiss(ctx.task_id.to_string()))?;
                Some(tags.to_vec())
            } else {
                None
            };
            match extract_keywords(&sample.text, ctx.tagger, ctx.max_keywords) {
                Ok(keywords) => {
                    spec.positive = ctx
                        .keyword_template
                        .replace("{keywords}", &keywords.join(", "));
                    spec.keywords = keywords;
                }
                Err(PromptError::NoVisualContent) => spec.fallback = true,
                Err(e) => return Err(e),
            }
            if let Some(tags) = style {
                spec.positive
                    .push_str(&ctx.style_template.replace("{style}", &tags.join(", ")));
                spec.style_tags = tags;
            }
        }
        Strategy::P4 => {
            let client = ctx.elaborator.ok_or(PromptError::MissingElaborator)?;
            spec.positive = elaborate_text(&direct, ElaborationMode::ImagePrompt, client)?;
            spec.elaborator_id = Some(client.id().to_string());
        }
    }
    Ok(spec)
}

/// Prompt records keyed by `(sample_id, strategy)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptTable {
    specs: BTreeMap<(String, Strategy), PromptSpec>,
}

impl PromptTable {
    pub fn insert(&mut self, spec: PromptSpec) -> Result<(), PromptError> {
        let key = (spec.sample_id.clone(), spec.strategy);
        if self.specs.contains_key(&key) {
            return Err(PromptError::Duplicate(key.0, key.1));
        }
        self.specs.insert(key, spec);
        Ok(())
    }

    pub fn get(&self, sample_id: &str, strategy: Strategy) -> Option<&PromptSpec> {
        self.specs.get(&(sample_id.to_string(), strategy))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptSpec> {
        self.specs.values()
    }

    /// One record per line, sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let records: Vec<&PromptSpec> = self.specs.values().collect();
        write_jsonl(path, &records)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let mut table = Self::default();
        for spec in read_jsonl::<PromptSpec>(path)? {
            table.insert(spec)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WhitespaceTokenizer;

    fn sample(text: &str) -> TextSample {
        TextSample {
            id: "s1".into(),
            text: text.into(),
            label: 0,
            split: None,
        }
    }

    #[test]
    fn p2_without_keywords_falls_back_to_direct_text() {
        let lex = StyleLexicon::default();
        let ctx = PromptContext::new("sentiment", &lex, &WhitespaceTokenizer);
        let spec = build_prompt(&sample("it is the of"), Strategy::P2, &ctx).unwrap();
        assert!(spec.fallback);
        assert_eq!(spec.positive, "it is the of");
        assert!(spec.keywords.is_empty());
    }

    #[test]
    fn p3_requires_lexicon_entry() {
        let lex = StyleLexicon::default();
        let ctx = PromptContext::new("legal", &lex, &WhitespaceTokenizer);
        assert!(matches!(
            build_prompt(&sample("red car"), Strategy::P3, &ctx),
            Err(PromptError::LexiconMiss(_))
        ));
    }

    #[test]
    fn p4_requires_elaborator() {
        let lex = StyleLexicon::default();
        let ctx = PromptContext::new("sentiment", &lex, &WhitespaceTokenizer);
        assert!(matches!(
            build_prompt(&sample("red car"), Strategy::P4, &ctx),
            Err(PromptError::MissingElaborator)
        ));
    }

    #[test]
    fn whitespace_rewrite_is_an_error() {
        let stub = StubRewriter::canned("s", "  \n ");
        assert!(matches!(
            elaborate_text("x", ElaborationMode::VisualDescription, &stub),
            Err(PromptError::EmptyRewrite(_))
        ));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("p3".parse::<Strategy>().unwrap(), Strategy::P3);
        assert!("P9".parse::<Strategy>().is_err());
    }

    #[test]
    fn lexicon_rejects_empty_task() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), vec![]);
        assert!(StyleLexicon::new(m).is_err());
    }
}

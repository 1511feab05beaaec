//! Per-sample input composition for the baselines.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Method;
use super::OrchestratorError;
use crate::corpus::{truncate_text, TextSample, Tokenizer};
use crate::prompting::{
    elaborate_text, extract_keywords, ElaborationMode, PosTagger, PromptError, TextRewriter,
};
use crate::util::read_jsonl;

/// Joins the original text and any appended material.
pub const SEPARATOR: &str = " ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalDoc {
    pub id: String,
    pub text: String,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Top-1 keyword-overlap retrieval over a local document list. A document
/// scores one point per distinct query phrase occurring in it as a
/// contiguous, case-insensitive word run. Ties go to the earlier document.
#[derive(Debug, Clone)]
pub struct KeywordRetriever {
    docs: Vec<RetrievalDoc>,
    indexed: Vec<Vec<String>>,
}

impl KeywordRetriever {
    pub fn new(docs: Vec<RetrievalDoc>) -> Self {
        let indexed = docs.iter().map(|d| words(&d.text)).collect();
        Self { docs, indexed }
    }

    /// Reads `{id, text}` records, one per line.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let docs: Vec<RetrievalDoc> = read_jsonl(path)?;
        if docs.is_empty() {
            return Err(OrchestratorError::Config(vec![format!(
                "retrieval corpus {} is empty",
                path.display()
            )]));
        }
        Ok(Self::new(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn score(&self, index: usize, query: &[String]) -> usize {
        let phrases: BTreeSet<Vec<String>> = query
            .iter()
            .map(|q| words(q))
            .filter(|w| !w.is_empty())
            .collect();
        phrases
            .iter()
            .filter(|p| contains_run(&self.indexed[index], p))
            .count()
    }

    /// Best document with a positive score.
    pub fn retrieve(&self, query: &[String]) -> Option<&RetrievalDoc> {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..self.docs.len() {
            let s = self.score(i, query);
            if s > 0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| &self.docs[i])
    }
}

/// What the image pathway needs for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualRequest {
    None,
    Generate,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedInput {
    pub sample_id: String,
    /// Effective text, truncated to the token budget.
    pub text: String,
    pub visual: VisualRequest,
    /// Retrieved document id (B3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<String>,
    /// B3 found nothing and the text went through unchanged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

pub struct ComposeHelpers<'a> {
    pub elaborator: Option<&'a dyn TextRewriter>,
    pub retriever: Option<&'a KeywordRetriever>,
    pub tagger: Option<&'a dyn PosTagger>,
    pub tokenizer: &'a dyn Tokenizer,
    pub max_tokens: usize,
    /// Keyword budget of the B3 query.
    pub max_keywords: usize,
}

/// Builds the effective text of `sample` under `method`. Appended material
/// follows the original after [`SEPARATOR`]; truncation to the token budget
/// happens after appending.
pub fn compose_input(
    sample: &TextSample,
    method: Method,
    helpers: &ComposeHelpers<'_>,
) -> Result<ComposedInput, OrchestratorError> {
    let truncate = |t: &str| truncate_text(t, helpers.max_tokens, helpers.tokenizer);
    let mut out = ComposedInput {
        sample_id: sample.id.clone(),
        text: truncate(&sample.text),
        visual: VisualRequest::None,
        retrieved: None,
        fallback: false,
    };
    match method {
        Method::TextOnly => {}
        Method::TextualExpansion => {
            let client = helpers.elaborator.ok_or(PromptError::MissingElaborator)?;
            let source = truncate(sample.text.trim());
            let description = elaborate_text(&source, ElaborationMode::VisualDescription, client)?;
            out.text = truncate(&format!("{}{SEPARATOR}{description}", sample.text));
        }
        Method::KnowledgeRetrieval => {
            let retriever = helpers.retriever.ok_or_else(|| {
                OrchestratorError::Config(vec!["missing key `retrieval.corpus`".into()])
            })?;
            let query = match extract_keywords(&sample.text, helpers.tagger, helpers.max_keywords) {
                Ok(k) => k,
                Err(PromptError::NoVisualContent) => vec![],
                Err(e) => return Err(e.into()),
            };
            match retriever.retrieve(&query) {
                Some(doc) => {
                    out.text = truncate(&format!("{}{SEPARATOR}{}", sample.text, doc.text));
                    out.retrieved = Some(doc.id.clone());
                }
                None => out.fallback = true,
            }
        }
        Method::GenImage | Method::GenImageFast => out.visual = VisualRequest::Generate,
        Method::OracleImage => out.visual = VisualRequest::Oracle,
    }
    Ok(out)
}

/// B3 bookkeeping; `with_retrieval + fallbacks == total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub total: usize,
    pub with_retrieval: usize,
    pub fallbacks: usize,
}

impl RetrievalStats {
    pub fn from_inputs(inputs: &[ComposedInput]) -> Self {
        Self {
            total: inputs.len(),
            with_retrieval: inputs.iter().filter(|i| i.retrieved.is_some()).count(),
            fallbacks: inputs.iter().filter(|i| i.fallback).count(),
        }
    }
}

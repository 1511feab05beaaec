//! Content-word phrase extraction.

use super::PromptError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosTag {
    Noun,
    Adjective,
    Verb,
    Other,
}

impl PosTag {
    pub fn is_content(self) -> bool {
        !matches!(self, PosTag::Other)
    }
}

/// Part-of-speech provider. Punctuation should be returned as separate
/// [`PosTag::Other`] tokens so that it breaks phrases.
pub trait PosTagger: Send + Sync {
    fn tag(&self, text: &str) -> Vec<(String, PosTag)>;
}

/// Function words, pronouns, auxiliaries, intensifiers and light verbs.
pub const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "absolutely",
    "after",
    "again",
    "all",
    "also",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "but",
    "by",
    "can",
    "could",
    "definitely",
    "did",
    "do",
    "does",
    "doing",
    "during",
    "each",
    "even",
    "every",
    "extremely",
    "few",
    "for",
    "from",
    "get",
    "gets",
    "got",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "him",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "look",
    "looks",
    "made",
    "make",
    "makes",
    "me",
    "more",
    "most",
    "much",
    "my",
    "new",
    "no",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "out",
    "over",
    "own",
    "quite",
    "rather",
    "really",
    "same",
    "seem",
    "seems",
    "she",
    "should",
    "so",
    "some",
    "such",
    "super",
    "than",
    "that",
    "the",
    "their",
    "them",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "totally",
    "under",
    "until",
    "up",
    "us",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
];

const BREAKERS: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')', '"', '[', ']'];

fn is_stopword(word: &str) -> bool {
    let lower = word.to_lowercase();
    STOPWORDS.binary_search(&lower.as_str()).is_ok()
}

/// Whitespace tokens with surrounding punctuation split off. Internal
/// hyphens and apostrophes stay inside the token.
fn heuristic_tags(text: &str) -> Vec<(String, PosTag)> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let trimmed_start = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
        let lead = &raw[..raw.len() - trimmed_start.len()];
        if lead.chars().any(|c| BREAKERS.contains(&c)) {
            out.push((String::new(), PosTag::Other));
        }
        let word = trimmed_start.trim_end_matches(|c: char| !c.is_alphanumeric());
        if !word.is_empty() {
            let tag = if is_stopword(word) {
                PosTag::Other
            } else {
                PosTag::Noun
            };
            out.push((word.to_string(), tag));
        }
        let tail = &trimmed_start[word.len()..];
        if tail.chars().any(|c| BREAKERS.contains(&c)) {
            out.push((String::new(), PosTag::Other));
        }
    }
    out
}

/// Maximal runs of content words, in text order.
fn phrases(tags: &[(String, PosTag)]) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for (word, tag) in tags {
        if tag.is_content() && !word.is_empty() {
            current.push(word);
        } else if !current.is_empty() {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

/// Content-word phrases of `text` in original order, at most
/// `max_keywords` of them. When there are more, the longest phrases (by
/// word count, earlier first on ties) are kept. Repeated phrases are
/// listed once. Without a tagger, stopword-filtered tokens count as content
/// words.
pub fn extract_keywords(
    text: &str,
    tagger: Option<&dyn PosTagger>,
    max_keywords: usize,
) -> Result<Vec<String>, PromptError> {
    if max_keywords == 0 {
        return Err(PromptError::Config("max_keywords must be positive".into()));
    }
    let text = text.trim();
    if text.is_empty() {
        return Err(PromptError::EmptyText);
    }
    let tags = match tagger {
        Some(t) => t.tag(text),
        None => heuristic_tags(text),
    };
    let mut found: Vec<String> = Vec::new();
    for p in phrases(&tags) {
        if !found.contains(&p) {
            found.push(p);
        }
    }
    if found.is_empty() {
        return Err(PromptError::NoVisualContent);
    }
    let mut ranked: Vec<usize> = (0..found.len()).collect();
    ranked.sort_by_key(|&i| (std::cmp::Reverse(found[i].split(' ').count()), i));
    ranked.truncate(max_keywords);
    ranked.sort_unstable();
    Ok(ranked.into_iter().map(|i| found[i].clone()).collect())
}

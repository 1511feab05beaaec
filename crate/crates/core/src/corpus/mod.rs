//! Dataset loading, label spaces, stratified splits and token truncation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{read_jsonl, write_jsonl};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown dataset format `{0}`")]
    UnknownFormat(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("dataset too small to split: {0}")]
    TooSmall(String),
    #[error("split file: {0}")]
    SplitFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    pub label: usize,
    /// Unset until [`make_splits`] or [`apply_splits`] assigns one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new(class_names: Vec<String>) -> Result<Self, CorpusError> {
        if class_names.len() < 2 {
            return Err(CorpusError::LabelSpace(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &class_names {
            if !seen.insert(n) {
                return Err(CorpusError::LabelSpace(format!("duplicate class `{n}`")));
            }
        }
        Ok(Self { class_names })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.class_names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.class_names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = CorpusError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(l: LabelSpace) -> Self {
        l.class_names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Header row naming `text` and `label` (optionally `id`) columns.
    /// Tab-delimited when the file ends in `.tsv`, comma otherwise.
    DelimitedRows,
    /// One JSON object per line with `text` and `label` (optionally `id`).
    RecordLines,
}

impl FromStr for DatasetFormat {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delimited_rows" | "csv" | "tsv" => Ok(Self::DelimitedRows),
            "record_lines" | "jsonl" => Ok(Self::RecordLines),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl DatasetFormat {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" | "tsv" => Some(Self::DelimitedRows),
            "jsonl" | "ndjson" => Some(Self::RecordLines),
            _ => None,
        }
    }
}

struct RawRow {
    id: Option<String>,
    text: String,
    label: String,
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
) -> Result<(Vec<TextSample>, LabelSpace), CorpusError> {
    let rows = match format {
        DatasetFormat::DelimitedRows => read_delimited(path)?,
        DatasetFormat::RecordLines => read_records(path)?,
    };
    if rows.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids = HashSet::new();
    let mut samples = Vec::with_capacity(rows.len());
    for (i, (row_no, raw)) in rows.into_iter().enumerate() {
        if raw.text.trim().is_empty() {
            return Err(CorpusError::MalformedRow {
                row: row_no,
                reason: "empty text".into(),
            });
        }
        let label = raw.label.trim().to_string();
        if label.is_empty() {
            return Err(CorpusError::MalformedRow {
                row: row_no,
                reason: "missing label".into(),
            });
        }
        let next = names.len();
        let idx = *index.entry(label.clone()).or_insert_with(|| {
            names.push(label);
            next
        });
        let id = raw.id.unwrap_or_else(|| format!("s{:06}", i + 1));
        if !ids.insert(id.clone()) {
            return Err(CorpusError::MalformedRow {
                row: row_no,
                reason: format!("duplicate id `{id}`"),
            });
        }
        samples.push(TextSample {
            id,
            text: raw.text,
            label: idx,
            split: None,
        });
    }
    Ok((samples, LabelSpace::new(names)?))
}

fn read_delimited(path: &Path) -> Result<Vec<(usize, RawRow)>, CorpusError> {
    let delimiter = if path.extension().and_then(|e| e.to_str()) == Some("tsv") {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let headers = reader.headers().map_err(csv_io)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (text_col, label_col) = match (col("text"), col("label")) {
        (Some(t), Some(l)) => (t, l),
        _ => {
            return Err(CorpusError::MalformedRow {
                row: 1,
                reason: "header must name `text` and `label` columns".into(),
            })
        }
    };
    let id_col = col("id");
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let rec = rec.map_err(|e| CorpusError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).map(str::to_string);
        let text = field(text_col).ok_or_else(|| CorpusError::MalformedRow {
            row,
            reason: "missing text".into(),
        })?;
        let label = field(label_col).unwrap_or_default();
        out.push((
            row,
            RawRow {
                id: id_col.and_then(field).filter(|s| !s.is_empty()),
                text,
                label,
            },
        ));
    }
    Ok(out)
}

fn csv_io(e: csv::Error) -> CorpusError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CorpusError::Io(io),
        other => CorpusError::MalformedRow {
            row: 0,
            reason: format!("{other:?}"),
        },
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, RawRow)>, CorpusError> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRow {
                row,
                reason: e.to_string(),
            })?;
        let scalar = |key: &str| match v.get(key) {
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(serde_json::Value::Bool(b)) => Some(b.to_string()),
            _ => None,
        };
        let text = scalar("text").ok_or_else(|| CorpusError::MalformedRow {
            row,
            reason: "missing text".into(),
        })?;
        let label = scalar("label").ok_or_else(|| CorpusError::MalformedRow {
            row,
            reason: "missing label".into(),
        })?;
        out.push((
            row,
            RawRow {
                id: scalar("id"),
                text,
                label,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, CorpusError> {
        let f = Self {
            train,
            validation,
            test,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CorpusError::Fractions(format!(
                "{parts:?} not all in [0, 1]"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Fractions(format!("sum is {sum}, expected 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let parts = [self.train, self.validation, self.test];
        let exact: Vec<f64> = parts.iter().map(|p| p * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut left = n.saturating_sub(sizes.iter().sum());
        let mut order: Vec<usize> = (0..3).filter(|&i| parts[i] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - sizes[a] as f64;
            let rb = exact[b] - sizes[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        [sizes[0], sizes[1], sizes[2]]
    }
}

/// Assigns every sample a split. Each class gets `floor(share)` or
/// `ceil(share)` members in every split, with class and split totals both
/// exact; members of a class are shuffled with the seeded generator before
/// being dealt out.
pub fn make_splits(
    samples: &[TextSample],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<TextSample>, CorpusError> {
    fractions.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(CorpusError::Empty);
    }
    let sizes = fractions.sizes(n);
    let parts = [fractions.train, fractions.validation, fractions.test];
    for (i, (&size, &frac)) in sizes.iter().zip(&parts).enumerate() {
        if frac > 0.0 && size == 0 {
            return Err(CorpusError::TooSmall(format!(
                "{} samples leave split {} empty",
                n,
                [Split::Train, Split::Validation, Split::Test][i]
            )));
        }
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        members[s.label].push(i);
    }
    let quotas = class_quotas(&members.iter().map(Vec::len).collect::<Vec<_>>(), sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for (c, idx) in members.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let mut it = idx.iter();
        for (k, split) in [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .enumerate()
        {
            for &i in it.by_ref().take(quotas[c][k]) {
                out[i].split = Some(split);
            }
        }
    }
    Ok(out)
}

/// Rounds the class-by-split shares `nc * size / n` to integers keeping both
/// margins: floors first, then the leftover units of each class go to the
/// splits with the most room.
fn class_quotas(class_sizes: &[usize], sizes: [usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = class_sizes.iter().sum();
    let mut quotas: Vec<[usize; 3]> = class_sizes
        .iter()
        .map(|&nc| sizes.map(|s| nc * s / n))
        .collect();
    let mut room: [usize; 3] =
        std::array::from_fn(|k| sizes[k] - quotas.iter().map(|q| q[k]).sum::<usize>());
    for (c, &nc) in class_sizes.iter().enumerate() {
        let mut left = nc - quotas[c].iter().sum::<usize>();
        while left > 0 {
            let k = (0..3)
                .filter(|&k| room[k] > 0 && quotas[c][k] * n <= nc * sizes[k])
                .max_by(|&a, &b| room[a].cmp(&room[b]).then(b.cmp(&a)))
                .expect("margins are consistent");
            quotas[c][k] += 1;
            room[k] -= 1;
            left -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub id: String,
    pub split: Split,
}

pub fn write_splits(path: &Path, samples: &[TextSample]) -> Result<(), CorpusError> {
    let records: Vec<SplitAssignment> = samples
        .iter()
        .map(|s| {
            s.split
                .map(|split| SplitAssignment {
                    id: s.id.clone(),
                    split,
                })
                .ok_or_else(|| CorpusError::SplitFile(format!("sample {} has no split", s.id)))
        })
        .collect::<Result<_, _>>()?;
    Ok(write_jsonl(path, &records)?)
}

pub fn read_splits(path: &Path) -> Result<Vec<SplitAssignment>, CorpusError> {
    Ok(read_jsonl(path)?)
}

/// Sets `split` on every sample from a persisted assignment.
pub fn apply_splits(
    samples: &mut [TextSample],
    assignments: &[SplitAssignment],
) -> Result<(), CorpusError> {
    let map: HashMap<&str, Split> = assignments
        .iter()
        .map(|a| (a.id.as_str(), a.split))
        .collect();
    for s in samples.iter_mut() {
        s.split = Some(
            *map.get(s.id.as_str())
                .ok_or_else(|| CorpusError::SplitFile(format!("no assignment for {}", s.id)))?,
        );
    }
    Ok(())
}

pub fn by_split(samples: &[TextSample], split: Split) -> Vec<&TextSample> {
    samples.iter().filter(|s| s.split == Some(split)).collect()
}

pub trait Tokenizer: Send + Sync {
    /// Byte ranges of the tokens in `text`, in order.
    fn token_spans(&self, text: &str) -> Vec<(usize, usize)>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn token_spans(&self, text: &str) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            match (ch.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push((s, i));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, text.len()));
        }
        spans
    }
}

/// The prefix of `text` ending at its `max_tokens`-th token; texts within
/// the limit come back unchanged.
pub fn truncate_text(text: &str, max_tokens: usize, tokenizer: &dyn Tokenizer) -> String {
    let spans = tokenizer.token_spans(text);
    if spans.len() <= max_tokens.max(1) {
        return text.to_string();
    }
    text[..spans[max_tokens.max(1) - 1].1].to_string()
}

//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::corpus::{DatasetFormat, Split, SplitFractions};
use crate::embedding::HttpEncoderConfig;
use crate::evaluation::ReportLayout;
use crate::fusion::FusionConfig;
use crate::generation::{
    preset_params, CostMode, CostModel, GenerationParams, HttpT2IConfig, PRESET_IDS,
};
use crate::prompting::{
    HttpRewriterConfig, Strategy, StyleLexicon, DEFAULT_KEYWORD_TEMPLATE, DEFAULT_MAX_KEYWORDS,
    DEFAULT_PROMPT_TOKENS, DEFAULT_STYLE_TEMPLATE,
};
use crate::training::TrainConfig;
use crate::util::canonical_hash;

/// Training preset applied when `[training]` names none.
pub const DEFAULT_TRAINING_PRESET: &str = "paper-appendix-b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "text_only_B1")]
    TextOnly,
    #[serde(rename = "textual_expansion_B2")]
    TextualExpansion,
    #[serde(rename = "knowledge_retrieval_B3")]
    KnowledgeRetrieval,
    #[serde(rename = "gen_image")]
    GenImage,
    #[serde(rename = "gen_image_fast_B4")]
    GenImageFast,
    #[serde(rename = "oracle_image_B5")]
    OracleImage,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::TextOnly => "text_only_B1",
            Method::TextualExpansion => "textual_expansion_B2",
            Method::KnowledgeRetrieval => "knowledge_retrieval_B3",
            Method::GenImage => "gen_image",
            Method::GenImageFast => "gen_image_fast_B4",
            Method::OracleImage => "oracle_image_B5",
        }
    }

    pub fn generates_images(self) -> bool {
        matches!(self, Method::GenImage | Method::GenImageFast)
    }

    pub fn has_image_features(self) -> bool {
        self.generates_images() || self == Method::OracleImage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
    /// Name used in report tables; the file stem by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Existing split assignment file; splits are generated otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default)]
    pub fractions: SplitFractions,
    #[serde(default)]
    pub split_seed: u64,
    /// Whitespace-token budget of the text fed to the text encoder.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_max_tokens() -> usize {
    256
}

impl DatasetConfig {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub strategy: Strategy,
    pub max_keywords: usize,
    pub token_limit: usize,
    pub keyword_template: String,
    pub style_template: String,
    pub lexicon: StyleLexicon,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::P2,
            max_keywords: DEFAULT_MAX_KEYWORDS,
            token_limit: DEFAULT_PROMPT_TOKENS,
            keyword_template: DEFAULT_KEYWORD_TEMPLATE.to_string(),
            style_template: DEFAULT_STYLE_TEMPLATE.to_string(),
            lexicon: StyleLexicon::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    #[default]
    Stub,
    Http,
}

/// Backend preset plus optional overrides of its values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    pub adapter: AdapterKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpT2IConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheduler_id: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    /// Offline deterministic hash encoder.
    Hash {
        id: String,
        dim: usize,
        /// Text: token cap. Image: patch-token count.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<usize>,
    },
    Http(HttpEncoderConfig),
}

impl EncoderSpec {
    pub fn id(&self) -> &str {
        match self {
            EncoderSpec::Hash { id, .. } => id,
            EncoderSpec::Http(c) => &c.provider_id,
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, EncoderSpec::Http(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewriterSpec {
    /// Offline rewriter: `text` is returned verbatim, or prefixed to the
    /// input when `echo` is set.
    Stub {
        id: String,
        text: String,
        #[serde(default)]
        echo: bool,
    },
    Http(HttpRewriterConfig),
}

impl RewriterSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, RewriterSpec::Http(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvidersConfig {
    pub text: EncoderSpec,
    pub image: EncoderSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elaborator: Option<RewriterSpec>,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            text: EncoderSpec::Hash {
                id: "hash-text".into(),
                dim: 32,
                tokens: None,
            },
            image: EncoderSpec::Hash {
                id: "hash-image".into(),
                dim: 32,
                tokens: None,
            },
            elaborator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// JSONL corpus of `{id, text}` documents.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    pub provider_id: String,
    /// Copies of the pooled vector used as image tokens.
    pub tokens: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            features: None,
            provider_id: "oracle".into(),
            tokens: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub split: Split,
    /// 0 disables the bootstrap.
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub cost_mode: CostMode,
    pub layout: ReportLayout,
    /// Test samples whose attention maps are exported (F2/F3 only).
    pub heatmap_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
            cost_mode: CostMode::Estimated,
            layout: ReportLayout::MainTable,
            heatmap_samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub method: Method,
    #[serde(default = "default_task")]
    pub task_id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Shared artifact cache; `<output_dir>/cache` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Bound on in-flight generation, embedding and rewrite requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_task() -> String {
    "sentiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_concurrency() -> usize {
    4
}

impl ExperimentConfig {
    /// Hash of the fully defaulted config; independent of key order in the
    /// source file.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.experiment_id))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir().join("cache"))
    }

    pub fn backend_id(&self) -> Option<String> {
        match (&self.generation.backend, self.method) {
            (Some(b), _) => Some(b.clone()),
            (None, Method::GenImageFast) => Some("flux-schnell-b4".into()),
            _ => None,
        }
    }

    /// Effective generation params for image methods.
    pub fn generation_params(&self) -> Result<Option<GenerationParams>, OrchestratorError> {
        if !self.method.generates_images() {
            return Ok(None);
        }
        let backend = self.backend_id().ok_or_else(|| {
            OrchestratorError::Config(vec!["missing key `generation.backend`".into()])
        })?;
        let g = &self.generation;
        let mut p = match preset_params(&backend) {
            Ok(p) => p,
            Err(_) => GenerationParams {
                backend_id: backend.clone(),
                steps: g.steps.unwrap_or(0),
                guidance_scale: g.guidance_scale.unwrap_or(0.0),
                width: g.width.unwrap_or(0),
                height: g.height.unwrap_or(0),
                scheduler_id: None,
                seed: 0,
                provider_managed: false,
            },
        };
        if let Some(s) = g.steps {
            p.steps = s;
        }
        if let Some(x) = g.guidance_scale {
            p.guidance_scale = x;
        }
        if let Some(w) = g.width {
            p.width = w;
        }
        if let Some(h) = g.height {
            p.height = h;
        }
        if let Some(s) = &g.scheduler_id {
            p.scheduler_id = Some(s.clone());
        }
        p.seed = g.seed;
        Ok(Some(p))
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.experiment_id.trim().is_empty() {
            problems.push("experiment_id is empty".into());
        } else if self.experiment_id.contains(['/', '\\']) || self.experiment_id.starts_with('.') {
            problems.push(format!(
                "experiment_id `{}` must be usable as a directory name",
                self.experiment_id
            ));
        }
        if self.seeds.is_empty() {
            problems.push("seeds must list at least one seed".into());
        }
        if self.concurrency == 0 {
            problems.push("concurrency must be positive".into());
        }
        if let Err(e) = self.dataset.fractions.validate() {
            problems.push(format!("dataset.fractions: {e}"));
        }
        if self.dataset.format.is_none() && DatasetFormat::from_path(&self.dataset.path).is_none() {
            problems.push(format!(
                "dataset.format is required for `{}` (unknown extension)",
                self.dataset.path.display()
            ));
        }
        if self.dataset.max_tokens == 0 {
            problems.push("dataset.max_tokens must be positive".into());
        }
        if self.prompt.max_keywords == 0 {
            problems.push("prompt.max_keywords must be positive".into());
        }
        if self.prompt.token_limit == 0 {
            problems.push("prompt.token_limit must be positive".into());
        }
        if !self.prompt.keyword_template.contains("{keywords}") {
            problems.push("prompt.keyword_template must contain `{keywords}`".into());
        }
        if let Err(e) = self.prompt.lexicon.validate() {
            problems.push(format!("prompt.lexicon: {e}"));
        }
        let gen = self.method.generates_images();
        if gen {
            match self.backend_id() {
                None => problems.push("missing key `generation.backend`".into()),
                Some(b) => {
                    let preset = PRESET_IDS.contains(&b.as_str());
                    let g = &self.generation;
                    if !preset && (g.steps.is_none() || g.width.is_none() || g.height.is_none()) {
                        problems.push(format!(
                            "generation.backend `{b}` is not a preset ({}); set generation.steps, width and height",
                            PRESET_IDS.join(", ")
                        ));
                    } else if let Ok(Some(p)) = self.generation_params() {
                        if let Err(e) = p.validate() {
                            problems.push(format!("generation: {e}"));
                        }
                    }
                }
            }
            if let Some(b) = self.backend_id() {
                if self.evaluation.cost_mode == CostMode::Estimated
                    && CostModel::published().get(&b).is_none()
                {
                    problems.push(format!(
                        "no published rate for backend `{b}`; set evaluation.cost_mode = \"measured\""
                    ));
                }
            }
            if self.generation.adapter == AdapterKind::Http && self.generation.http.is_none() {
                problems
                    .push("generation.adapter = \"http\" needs a [generation.http] table".into());
            }
            if self.prompt.strategy == Strategy::P3
                && self.prompt.lexicon.tags(&self.task_id).is_none()
            {
                problems.push(format!(
                    "prompt.lexicon has no entry for task `{}`",
                    self.task_id
                ));
            }
        }
        let needs_elaborator = self.method == Method::TextualExpansion
            || (gen && self.prompt.strategy == Strategy::P4);
        if needs_elaborator && self.providers.elaborator.is_none() {
            problems.push("missing key `providers.elaborator`".into());
        }
        if self.method == Method::KnowledgeRetrieval && self.retrieval.corpus.is_none() {
            problems.push("missing key `retrieval.corpus`".into());
        }
        if self.method == Method::OracleImage {
            if self.oracle.features.is_none() {
                problems.push("missing key `oracle.features`".into());
            }
            if self.oracle.tokens == 0 {
                problems.push("oracle.tokens must be positive".into());
            }
        }
        for (name, spec) in [
            ("text", &self.providers.text),
            ("image", &self.providers.image),
        ] {
            match spec {
                EncoderSpec::Hash { id, dim, tokens } => {
                    if id.trim().is_empty() {
                        problems.push(format!("providers.{name}.id is empty"));
                    }
                    if *dim == 0 {
                        problems.push(format!("providers.{name}.dim must be positive"));
                    }
                    if *tokens == Some(0) {
                        problems.push(format!("providers.{name}.tokens must be positive"));
                    }
                }
                EncoderSpec::Http(c) if c.dim == 0 => {
                    problems.push(format!("providers.{name}.dim must be positive"))
                }
                EncoderSpec::Http(_) => {}
            }
        }
        if let Err(e) = self.fusion.validate() {
            problems.push(format!("fusion: {e}"));
        }
        if let Err(e) = self.training.validate() {
            problems.push(format!("training: {e}"));
        }
        problems
    }

    /// Whether any configured provider needs the network.
    pub fn remote_providers(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.method.generates_images() && self.generation.adapter == AdapterKind::Http {
            out.push("generation.adapter".to_string());
        }
        if self.providers.text.is_remote() {
            out.push("providers.text".into());
        }
        if self.method.generates_images() && self.providers.image.is_remote() {
            out.push("providers.image".into());
        }
        if self
            .providers
            .elaborator
            .as_ref()
            .is_some_and(RewriterSpec::is_remote)
        {
            out.push("providers.elaborator".into());
        }
        out
    }
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables.
pub fn apply_override(
    table: &mut toml::Table,
    key: &str,
    value: toml::Value,
) -> Result<(), OrchestratorError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(OrchestratorError::Config(vec![format!(
            "bad override key `{key}`"
        )]));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            OrchestratorError::Config(vec![format!("override `{key}`: `{part}` is not a table")])
        })?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Expands `[training].preset` into the preset's values, keeping explicit
/// keys.
fn expand_training_preset(table: &mut toml::Table, problems: &mut Vec<String>) {
    let training = table
        .entry("training")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let Some(t) = training.as_table_mut() else {
        problems.push("`training` must be a table".into());
        return;
    };
    let name = match t.remove("preset") {
        None => DEFAULT_TRAINING_PRESET.to_string(),
        Some(toml::Value::String(s)) => s,
        Some(_) => {
            problems.push("training.preset must be a string".into());
            return;
        }
    };
    let Some(preset) = TrainConfig::preset(&name) else {
        problems.push(format!(
            "unknown training preset `{name}` (expected paper-appendix-b or head-default)"
        ));
        return;
    };
    let base = toml::Table::try_from(&preset).expect("train config serializes");
    for (k, v) in base {
        t.entry(k).or_insert(v);
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Parses a config table. Relative paths resolve against `base_dir`.
pub fn parse_config_table(
    mut table: toml::Table,
    base_dir: &Path,
) -> Result<ExperimentConfig, OrchestratorError> {
    let mut problems = Vec::new();
    expand_training_preset(&mut table, &mut problems);
    let mut unknown = Vec::new();
    let parsed: Result<ExperimentConfig, _> =
        serde_ignored::deserialize(toml::Value::Table(table), |path| {
            unknown.push(path.to_string())
        });
    for k in unknown {
        problems.push(format!("unknown key `{k}`"));
    }
    let mut cfg = match parsed {
        Ok(c) => c,
        Err(e) => {
            problems.push(e.to_string().trim().to_string());
            return Err(OrchestratorError::Config(problems));
        }
    };
    resolve(base_dir, &mut cfg.dataset.path);
    for p in [
        cfg.dataset.splits.as_mut(),
        cfg.retrieval.corpus.as_mut(),
        cfg.oracle.features.as_mut(),
        cfg.output_dir.as_mut(),
        cfg.cache_dir.as_mut(),
    ]
    .into_iter()
    .flatten()
    {
        resolve(base_dir, p);
    }
    problems.extend(cfg.validate());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(OrchestratorError::Config(problems))
    }
}

pub fn parse_config_str(
    text: &str,
    base_dir: &Path,
) -> Result<ExperimentConfig, OrchestratorError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        OrchestratorError::Config(vec![e.to_string().trim().to_string()])
    })?;
    parse_config_table(table, base_dir)
}

pub fn read_config_table(path: &Path) -> Result<toml::Table, OrchestratorError> {
    let text = std::fs::read_to_string(path)?;
    text.parse().map_err(|e: toml::de::Error| {
        OrchestratorError::Config(vec![format!(
            "{}: {}",
            path.display(),
            e.to_string().trim()
        )])
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, OrchestratorError> {
    let table = read_config_table(path)?;
    parse_config_table(table, path.parent().unwrap_or(Path::new(".")))
}

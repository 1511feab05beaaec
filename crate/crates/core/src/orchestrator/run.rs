//! Staged execution of one experiment with a resumable manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::compose::{
    compose_input, ComposeHelpers, ComposedInput, KeywordRetriever, RetrievalStats, VisualRequest,
};
use super::config::{ExperimentConfig, Method};
use super::services::{CallCounts, Services};
use super::OrchestratorError;
use crate::corpus::{
    apply_splits, load_dataset, make_splits, read_splits, DatasetFormat, Split, TextSample,
    WhitespaceTokenizer,
};
use crate::embedding::{
    clip_score_full, embed_image_bytes, embed_text, EmbeddingCache, EmbeddingError, FeaturePack,
    ImageEncoder, OracleFeatures,
};
use crate::evaluation::{
    bootstrap_summary, population_std, render_report, summarize_cell, CellSummary, ClipStats,
    CostSummary, EvalReport, ReportCell,
};
use crate::fusion::{export_attention, FusionConfig, FusionHead, FusionMechanism, PreparedPack};
use crate::generation::{
    generate_image, ledger_totals, CostModel, GeneratedImageRecord, ImageCache, Ledger,
};
use crate::prompting::{build_prompt, PromptContext, PromptSpec, PromptTable};
use crate::tensorcore::{checkpoint_manifest, read_checkpoint};
use crate::training::{
    evaluate_split, train_loop, write_history, Dataset, SplitValidator, TrainState,
};
use crate::util::{atomic_write, bounded_map, path_safe, read_jsonl, sha256_file, write_jsonl};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPONENT_VERSION: &str = concat!("synthsight-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prompts,
    Images,
    Embeddings,
    Training,
    Evaluation,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Prompts,
        Stage::Images,
        Stage::Embeddings,
        Stage::Training,
        Stage::Evaluation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prompts => "prompts",
            Stage::Images => "images",
            Stage::Embeddings => "embeddings",
            Stage::Training => "training",
            Stage::Evaluation => "evaluation",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = OrchestratorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| OrchestratorError::Config(vec![format!("unknown stage `{s}`")]))
    }
}

/// A file produced by a stage. Paths inside the run directory are stored
/// relative to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done {
        artifacts: Vec<ArtifactRef>,
        finished_at: String,
    },
    Failed {
        reason: String,
        failed_at: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub config_hash: String,
    pub component_version: String,
    pub created_at: String,
    pub updated_at: String,
    pub stages: BTreeMap<Stage, StageStatus>,
}

impl RunManifest {
    fn fresh(cfg: &ExperimentConfig) -> Self {
        let now = now();
        Self {
            experiment_id: cfg.experiment_id.clone(),
            config_hash: cfg.hash(),
            component_version: COMPONENT_VERSION.to_string(),
            created_at: now.clone(),
            updated_at: now,
            stages: Stage::ALL
                .into_iter()
                .map(|s| (s, StageStatus::Pending))
                .collect(),
        }
    }

    pub fn status(&self, stage: Stage) -> &StageStatus {
        self.stages.get(&stage).unwrap_or(&StageStatus::Pending)
    }

    pub fn is_complete(&self) -> bool {
        Stage::ALL
            .iter()
            .all(|s| matches!(self.status(*s), StageStatus::Done { .. }))
    }

    fn save(&mut self, run_dir: &Path) -> Result<(), OrchestratorError> {
        self.updated_at = now();
        let bytes = serde_json::to_vec_pretty(self)?;
        atomic_write(&run_dir.join(MANIFEST_FILE), &bytes)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest, OrchestratorError> {
    let path = run_dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| OrchestratorError::CorruptManifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn artifact_path(run_dir: &Path, a: &ArtifactRef) -> PathBuf {
    let p = PathBuf::from(&a.path);
    if p.is_absolute() {
        p
    } else {
        run_dir.join(p)
    }
}

fn verify(run_dir: &Path, artifacts: &[ArtifactRef]) -> bool {
    artifacts
        .iter()
        .all(|a| sha256_file(&artifact_path(run_dir, a)).is_ok_and(|h| h == a.sha256))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Refuse any provider that needs the network.
    pub offline: bool,
    /// Last stage to execute.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    /// Stages executed this time, in order; the rest were verified and
    /// skipped.
    pub executed: Vec<Stage>,
    pub calls: CallCounts,
    /// Per-seed reports, present once evaluation is done.
    pub reports: Vec<EvalReport>,
    pub summary: Option<CellSummary>,
}

/// Builds providers from the config and runs it.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<RunOutcome, OrchestratorError> {
    let services = Services::from_config(cfg, opts.offline)?;
    run_experiment_with(cfg, &services, opts)
}

/// Runs the stages in order. A stage whose manifest entry is done and
/// whose artifacts hash-verify is skipped; once a stage executes, every
/// later stage executes too. The manifest is rewritten after each stage.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    services: &Services,
    opts: &RunOptions,
) -> Result<RunOutcome, OrchestratorError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(OrchestratorError::Config(problems));
    }
    let run_dir = cfg.output_dir();
    std::fs::create_dir_all(&run_dir)?;
    let mut manifest = match load_manifest(&run_dir) {
        Ok(m) if m.config_hash == cfg.hash() => m,
        Ok(_) => {
            log::warn!(
                "{}: config changed since the last run; starting over",
                run_dir.display()
            );
            RunManifest::fresh(cfg)
        }
        Err(OrchestratorError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            RunManifest::fresh(cfg)
        }
        Err(e) => {
            log::warn!("{e}; starting over");
            RunManifest::fresh(cfg)
        }
    };
    atomic_write(
        &run_dir.join("config.json"),
        &serde_json::to_vec_pretty(cfg)?,
    )?;
    let ctx = StageContext::new(cfg, services, &run_dir);
    let mut executed = Vec::new();
    let mut dirty = false;
    for stage in Stage::ALL {
        let skip = !dirty
            && match manifest.status(stage) {
                StageStatus::Done { artifacts, .. } => verify(&run_dir, artifacts),
                _ => false,
            };
        if skip {
            log::info!("{}: {stage} verified, skipping", cfg.experiment_id);
        } else {
            dirty = true;
            log::info!("{}: running {stage}", cfg.experiment_id);
            match ctx.run(stage) {
                Ok(paths) => {
                    let artifacts = paths
                        .iter()
                        .map(|p| ctx.artifact(p))
                        .collect::<Result<Vec<_>, _>>()?;
                    manifest.stages.insert(
                        stage,
                        StageStatus::Done {
                            artifacts,
                            finished_at: now(),
                        },
                    );
                    executed.push(stage);
                }
                Err(e) => {
                    let reason = e.to_string();
                    manifest.stages.insert(
                        stage,
                        StageStatus::Failed {
                            reason: reason.clone(),
                            failed_at: now(),
                        },
                    );
                    for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
                        manifest.stages.insert(later, StageStatus::Pending);
                    }
                    manifest.save(&run_dir)?;
                    return Err(OrchestratorError::Stage {
                        stage: stage.name().into(),
                        reason,
                    });
                }
            }
            for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
                manifest.stages.insert(later, StageStatus::Pending);
            }
            manifest.save(&run_dir)?;
        }
        if opts.stop_after == Some(stage) {
            break;
        }
    }
    let (reports, summary) =
        if matches!(manifest.status(Stage::Evaluation), StageStatus::Done { .. }) {
            let reports = cfg
                .seeds
                .iter()
                .map(|s| read_json::<EvalReport>(&run_dir.join(seed_dir(*s)).join("eval.json")))
                .collect::<Result<Vec<_>, _>>()?;
            let cell: ReportCell = read_json(&run_dir.join("cell.json"))?;
            (reports, Some(cell.summary))
        } else {
            (vec![], None)
        };
    Ok(RunOutcome {
        run_dir,
        manifest,
        executed,
        calls: services.calls(),
        reports,
        summary,
    })
}

/// Axis values identifying a run in combined tables.
pub fn cell_axes(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let gen = cfg.method.generates_images();
    let params = cfg.generation_params().ok().flatten();
    let mut axes = BTreeMap::new();
    axes.insert("method".into(), cfg.method.id().into());
    axes.insert("dataset".into(), cfg.dataset.display_name());
    axes.insert(
        "backend".into(),
        cfg.backend_id()
            .filter(|_| gen)
            .unwrap_or_else(|| "none".into()),
    );
    axes.insert(
        "strategy".into(),
        if gen {
            cfg.prompt.strategy.to_string()
        } else {
            "none".into()
        },
    );
    axes.insert("fusion".into(), cfg.fusion.mechanism.short_name().into());
    axes.insert("lr".into(), format!("{:e}", cfg.training.learning_rate));
    axes.insert(
        "steps".into(),
        params
            .map(|p| p.steps.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    axes
}

fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, OrchestratorError> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

/// One sample after composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InputRecord {
    #[serde(flatten)]
    input: ComposedInput,
    label: usize,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Composition {
    class_names: Vec<String>,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    retrieval: Option<RetrievalStats>,
    prompts: usize,
    prompt_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageEntry {
    sample_id: String,
    record: GeneratedImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureEntry {
    sample_id: String,
    pack: FeaturePack,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clip: Option<(f64, f64)>,
}

struct StageContext<'a> {
    cfg: &'a ExperimentConfig,
    services: &'a Services,
    run_dir: &'a Path,
    images: ImageCache,
    embeddings: EmbeddingCache,
    ledger: Ledger,
}

impl<'a> StageContext<'a> {
    fn new(cfg: &'a ExperimentConfig, services: &'a Services, run_dir: &'a Path) -> Self {
        let cache = cfg.cache_dir();
        Self {
            cfg,
            services,
            run_dir,
            images: ImageCache::new(&cache),
            embeddings: EmbeddingCache::new(&cache),
            ledger: Ledger::new(cache.join("ledger.jsonl")),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn artifact(&self, path: &Path) -> Result<ArtifactRef, OrchestratorError> {
        let sha256 = sha256_file(path)?;
        let stored = match path.strip_prefix(self.run_dir) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => path.to_string_lossy().into_owned(),
        };
        Ok(ArtifactRef {
            path: stored,
            sha256,
        })
    }

    fn run(&self, stage: Stage) -> Result<Vec<PathBuf>, OrchestratorError> {
        match stage {
            Stage::Prompts => self.prompts(),
            Stage::Images => self.images(),
            Stage::Embeddings => self.embeddings(),
            Stage::Training => self.training(),
            Stage::Evaluation => self.evaluation(),
        }
    }

    fn workers(&self) -> usize {
        self.cfg.concurrency
    }

    fn load_samples(&self) -> Result<(Vec<TextSample>, Vec<String>), OrchestratorError> {
        let ds = &self.cfg.dataset;
        let format = ds
            .format
            .or_else(|| DatasetFormat::from_path(&ds.path))
            .ok_or_else(|| OrchestratorError::Config(vec!["dataset.format is required".into()]))?;
        let (mut samples, labels) = load_dataset(&ds.path, format)?;
        match &ds.splits {
            Some(path) => apply_splits(&mut samples, &read_splits(path)?)?,
            None => samples = make_splits(&samples, ds.fractions, ds.split_seed)?,
        }
        Ok((samples, labels.names().to_vec()))
    }

    fn read_inputs(&self) -> Result<Vec<InputRecord>, OrchestratorError> {
        Ok(read_jsonl(&self.path("inputs.jsonl"))?)
    }

    fn prompts(&self) -> Result<Vec<PathBuf>, OrchestratorError> {
        let cfg = self.cfg;
        let (samples, class_names) = self.load_samples()?;
        let retriever = match (&cfg.retrieval.corpus, cfg.method) {
            (Some(p), Method::KnowledgeRetrieval) => Some(KeywordRetriever::load(p)?),
            _ => None,
        };
        let tokenizer = WhitespaceTokenizer;
        let helpers = ComposeHelpers {
            elaborator: self.services.elaborator(),
            retriever: retriever.as_ref(),
            tagger: None,
            tokenizer: &tokenizer,
            max_tokens: cfg.dataset.max_tokens,
            max_keywords: cfg.prompt.max_keywords,
        };
        let inputs: Vec<InputRecord> = bounded_map(&samples, self.workers(), |s| {
            Ok::<_, OrchestratorError>(InputRecord {
                input: compose_input(s, cfg.method, &helpers)?,
                label: s.label,
                split: s.split.expect("splits assigned"),
            })
        })?;
        let mut table = PromptTable::default();
        if cfg.method.generates_images() {
            let ctx = PromptContext {
                token_limit: cfg.prompt.token_limit,
                max_keywords: cfg.prompt.max_keywords,
                keyword_template: &cfg.prompt.keyword_template,
                style_template: &cfg.prompt.style_template,
                elaborator: self.services.elaborator(),
                ..PromptContext::new(&cfg.task_id, &cfg.prompt.lexicon, &tokenizer)
            };
            let specs: Vec<PromptSpec> = bounded_map(&samples, self.workers(), |s| {
                build_prompt(s, cfg.prompt.strategy, &ctx)
            })?;
            for spec in specs {
                table.insert(spec)?;
            }
        }
        let retrieval_inputs: Vec<ComposedInput> = inputs.iter().map(|r| r.input.clone()).collect();
        let composition = Composition {
            class_names,
            samples: inputs.len(),
            retrieval: (cfg.method == Method::KnowledgeRetrieval)
                .then(|| RetrievalStats::from_inputs(&retrieval_inputs)),
            prompts: table.len(),
            prompt_fallbacks: table.iter().filter(|p| p.fallback).count(),
        };
        if let Some(r) = &composition.retrieval {
            log::info!(
                "retrieval: {} of {} samples matched, {} fell back to text only",
                r.with_retrieval,
                r.total,
                r.fallbacks
            );
        }
        let splits = self.path("splits.jsonl");
        crate::corpus::write_splits(&splits, &samples)?;
        let inputs_path = self.path("inputs.jsonl");
        write_jsonl(&inputs_path, &inputs)?;
        let comp_path = self.path("composition.json");
        write_json(&comp_path, &composition)?;
        let prompts_path = self.path("prompts.jsonl");
        table.save(&prompts_path)?;
        Ok(vec![splits, inputs_path, comp_path, prompts_path])
    }

    fn images(&self) -> Result<Vec<PathBuf>, OrchestratorError> {
        let path = self.path("images.jsonl");
        let Some(params) = self.cfg.generation_params()? else {
            write_jsonl::<ImageEntry>(&path, &[])?;
            return Ok(vec![path]);
        };
        let backend = self.services.backend.as_ref().ok_or_else(|| {
            OrchestratorError::Config(vec!["no generation backend configured".into()])
        })?;
        let table = PromptTable::load(&self.path("prompts.jsonl"))?;
        let prompts: Vec<&PromptSpec> = table.iter().collect();
        let costs = CostModel::published();
        let entries: Vec<ImageEntry> = bounded_map(&prompts, self.workers(), |p| {
            let record = generate_image(
                p,
                &params,
                backend,
                &self.images,
                Some(&self.ledger),
                &costs,
            )?;
            Ok::<_, OrchestratorError>(ImageEntry {
                sample_id: p.sample_id.clone(),
                record,
            })
        })?;
        write_jsonl(&path, &entries)?;
        let mut out = vec![path];
        out.extend(
            entries
                .iter()
                .map(|e| self.images.root().join(&e.record.image_ref)),
        );
        Ok(out)
    }

    fn embeddings(&self) -> Result<Vec<PathBuf>, OrchestratorError> {
        let cfg = self.cfg;
        let inputs = self.read_inputs()?;
        let images: HashMap<String, GeneratedImageRecord> =
            read_jsonl::<ImageEntry>(&self.path("images.jsonl"))?
                .into_iter()
                .map(|e| (e.sample_id, e.record))
                .collect();
        let oracle = match (&cfg.oracle.features, cfg.method) {
            (Some(p), Method::OracleImage) => {
                Some(OracleFeatures::load(p, cfg.oracle.provider_id.clone())?)
            }
            _ => None,
        };
        let image_dim = match &oracle {
            Some(o) => o.dim(),
            None => self.services.image.dim(),
        };
        let entries: Vec<FeatureEntry> = bounded_map(&inputs, self.workers(), |rec| {
            let id = &rec.input.sample_id;
            let (text_pooled, text_tokens) =
                embed_text(&rec.input.text, &self.services.text, &self.embeddings)?;
            let (pack, clip) = match rec.input.visual {
                VisualRequest::None => (
                    FeaturePack::text_only(text_pooled, text_tokens, image_dim)?,
                    None,
                ),
                VisualRequest::Oracle => {
                    let (ip, it) = oracle
                        .as_ref()
                        .ok_or_else(|| EmbeddingError::Oracle("no feature file loaded".into()))?
                        .lookup(id, cfg.oracle.tokens)?;
                    (FeaturePack::new(text_pooled, text_tokens, ip, it)?, None)
                }
                VisualRequest::Generate => {
                    let record = images.get(id).ok_or_else(|| {
                        EmbeddingError::MissingArtifact(format!("image for sample {id}"))
                    })?;
                    let bytes = self.images.read_bytes(record)?;
                    if crate::util::sha256_hex(&bytes) != record.content_hash {
                        return Err(
                            EmbeddingError::MissingArtifact(record.image_ref.clone()).into()
                        );
                    }
                    let image: &dyn ImageEncoder = &self.services.image;
                    let (ip, it) = embed_image_bytes(&bytes, image, &self.embeddings)?;
                    let clip = if ip.dim() == text_pooled.dim() {
                        clip_score_full(&ip, &text_pooled)
                            .ok()
                            .map(|c| (c.cosine, c.score))
                    } else {
                        None
                    };
                    (FeaturePack::new(text_pooled, text_tokens, ip, it)?, clip)
                }
            };
            Ok::<_, OrchestratorError>(FeatureEntry {
                sample_id: id.clone(),
                pack,
                clip,
            })
        })?;
        let path = self.path("features.jsonl");
        write_jsonl(&path, &entries)?;
        Ok(vec![path])
    }

    fn fusion_config(&self, classes: usize) -> FusionConfig {
        FusionConfig {
            num_classes: classes,
            ..self.cfg.fusion.clone()
        }
    }

    fn load_split_data(&self) -> Result<SplitData, OrchestratorError> {
        let inputs = self.read_inputs()?;
        let composition: Composition = read_json(&self.path("composition.json"))?;
        let features: HashMap<String, FeatureEntry> =
            read_jsonl::<FeatureEntry>(&self.path("features.jsonl"))?
                .into_iter()
                .map(|e| (e.sample_id.clone(), e))
                .collect();
        let mut data = SplitData {
            class_names: composition.class_names,
            ..Default::default()
        };
        for rec in inputs {
            let f = features.get(&rec.input.sample_id).ok_or_else(|| {
                EmbeddingError::MissingArtifact(format!(
                    "features for sample {}",
                    rec.input.sample_id
                ))
            })?;
            let part = data.parts.entry(rec.split).or_default();
            part.ids.push(rec.input.sample_id.clone());
            part.packs.push(PreparedPack::from_pack(&f.pack)?);
            part.labels.push(rec.label);
            part.text_words.push(
                rec.input
                    .text
                    .split_whitespace()
                    .map(str::to_string)
                    .collect(),
            );
            part.clip.push(f.clip);
            data.text_dim = f.pack.text_dim();
            data.image_dim = f.pack.image_dim();
        }
        Ok(data)
    }

    fn training(&self) -> Result<Vec<PathBuf>, OrchestratorError> {
        let data = self.load_split_data()?;
        let train = data.part(Split::Train)?;
        let val = data.part(Split::Validation)?;
        let fusion = self.fusion_config(data.class_names.len());
        let outputs: Vec<Vec<PathBuf>> = bounded_map(&self.cfg.seeds, self.workers(), |&seed| {
            let dir = self.path(&seed_dir(seed));
            std::fs::create_dir_all(&dir)?;
            let head =
                FusionHead::<f64>::build(fusion.clone(), data.text_dim, data.image_dim, seed)?;
            let train_cfg = crate::training::TrainConfig {
                seed,
                ..self.cfg.training.clone()
            };
            let mut validator = SplitValidator {
                data: val.dataset()?,
                class_names: data.class_names.clone(),
            };
            let (head, state) = train_loop(
                head,
                train.dataset()?,
                &mut validator,
                &train_cfg,
                Some(&dir),
            )?;
            let history = dir.join("history.jsonl");
            write_history(&history, &state.history)?;
            let state_path = dir.join("state.json");
            write_json(
                &state_path,
                &TrainState {
                    best_params: Some(PathBuf::from("best.ckpt")),
                    ..state
                },
            )?;
            let manifest = dir.join("best.manifest.json");
            write_json(&manifest, &checkpoint_manifest(&head.params, seed))?;
            Ok::<_, OrchestratorError>(vec![dir.join("best.ckpt"), manifest, history, state_path])
        })?;
        Ok(outputs.into_iter().flatten().collect())
    }

    fn load_head(&self, data: &SplitData, seed: u64) -> Result<FusionHead<f64>, OrchestratorError> {
        let fusion = self.fusion_config(data.class_names.len());
        let mut head = FusionHead::<f64>::build(fusion, data.text_dim, data.image_dim, seed)?;
        let file = std::fs::File::open(self.path(&seed_dir(seed)).join("best.ckpt"))?;
        let stored = read_checkpoint::<f64, _>(std::io::BufReader::new(file))?;
        head.params.copy_values_from(&stored)?;
        Ok(head)
    }

    fn cost_summary(&self) -> Result<Option<CostSummary>, OrchestratorError> {
        if !self.cfg.method.generates_images() {
            return Ok(None);
        }
        let records: Vec<GeneratedImageRecord> =
            read_jsonl::<ImageEntry>(&self.path("images.jsonl"))?
                .into_iter()
                .map(|e| e.record)
                .collect();
        let mode = self.cfg.evaluation.cost_mode;
        let totals = ledger_totals(&records, &CostModel::published(), mode)?;
        Ok(Some(CostSummary {
            images: totals.total.images,
            total_cost_usd: totals.total_cost_usd(),
            total_latency_s: totals.total_latency_s(),
            mode: mode.to_string(),
        }))
    }

    fn evaluation(&self) -> Result<Vec<PathBuf>, OrchestratorError> {
        let cfg = self.cfg;
        let ev = &cfg.evaluation;
        let data = self.load_split_data()?;
        let part = data.part(ev.split)?;
        let clip_values: Vec<(f64, f64)> = part.clip.iter().flatten().copied().collect();
        let clip = (!clip_values.is_empty()).then(|| {
            let cos: Vec<f64> = clip_values.iter().map(|c| c.0).collect();
            let score: Vec<f64> = clip_values.iter().map(|c| c.1).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            ClipStats {
                n: clip_values.len(),
                score_mean: mean(&score),
                score_std: population_std(&score),
                cosine_mean: mean(&cos),
                cosine_std: population_std(&cos),
            }
        });
        let cost = self.cost_summary()?;
        let mut out = Vec::new();
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            let head = self.load_head(&data, seed)?;
            let outcome = evaluate_split(&head, &part.dataset()?, &data.class_names)?;
            let mut report = outcome.report;
            if ev.bootstrap_resamples > 0 {
                report.bootstrap = Some(bootstrap_summary(
                    &outcome.predictions,
                    ev.bootstrap_resamples,
                    ev.bootstrap_seed,
                )?);
            }
            report.clip = clip.clone();
            report.cost = cost.clone();
            let dir = self.path(&seed_dir(seed));
            let preds = dir.join("predictions.jsonl");
            write_jsonl(&preds, &outcome.predictions.items)?;
            let eval = dir.join("eval.json");
            write_json(&eval, &report)?;
            out.extend([preds, eval]);
            reports.push(report);
        }
        let cell = ReportCell {
            experiment_id: cfg.experiment_id.clone(),
            axes: cell_axes(cfg),
            summary: summarize_cell(&reports)?,
        };
        let cell_path = self.path("cell.json");
        write_json(&cell_path, &cell)?;
        let rendered = render_report(std::slice::from_ref(&cell), ev.layout)?;
        for (name, body) in [
            ("report.txt", rendered.text.clone()),
            ("report.tsv", rendered.tsv.clone()),
            ("records.jsonl", rendered.records_jsonl()),
        ] {
            let p = self.path(name);
            atomic_write(&p, body.as_bytes())?;
            out.push(p);
        }
        out.push(cell_path);
        out.extend(self.heatmaps(&data, part)?);
        Ok(out)
    }

    /// Attention maps of the first seed's head for the first few samples of
    /// the evaluation split, ordered by id.
    fn heatmaps(
        &self,
        data: &SplitData,
        part: &SplitPart,
    ) -> Result<Vec<PathBuf>, OrchestratorError> {
        let cfg = self.cfg;
        if !cfg.method.has_image_features()
            || cfg.fusion.mechanism == FusionMechanism::Concat
            || cfg.evaluation.heatmap_samples == 0
        {
            return Ok(vec![]);
        }
        let head = self.load_head(data, cfg.seeds[0])?;
        let dir = self.path("heatmaps");
        std::fs::create_dir_all(&dir)?;
        let mut order: Vec<usize> = (0..part.ids.len()).collect();
        order.sort_by(|&a, &b| part.ids[a].cmp(&part.ids[b]));
        let mut out = Vec::new();
        for &i in order.iter().take(cfg.evaluation.heatmap_samples) {
            let pack = &part.packs[i];
            let forward = head.forward_prepared(pack, None)?;
            let Some(bundle) = forward.attention else {
                continue;
            };
            let text_len = pack.text_tokens.rows();
            let words = &part.text_words[i];
            let text_labels: Vec<String> = (0..text_len)
                .map(|t| match words.get(t) {
                    Some(w) if words.len() >= text_len => format!("{t}:{w}"),
                    _ => format!("t{t}"),
                })
                .collect();
            let image_len = match bundle.layout {
                crate::fusion::AttentionLayout::Cross { image_len, .. } => image_len,
                crate::fusion::AttentionLayout::Prefix { prefix_len, .. } => prefix_len,
            };
            let image_labels: Vec<String> = (0..image_len).map(|j| format!("v{j}")).collect();
            let table = export_attention(&bundle, &text_labels, &image_labels)?;
            let path = dir.join(format!("{}.tsv", path_safe(&part.ids[i])));
            atomic_write(&path, table.to_tsv().as_bytes())?;
            out.push(path);
        }
        Ok(out)
    }
}

#[derive(Default)]
struct SplitPart {
    ids: Vec<String>,
    packs: Vec<PreparedPack<f64>>,
    labels: Vec<usize>,
    text_words: Vec<Vec<String>>,
    clip: Vec<Option<(f64, f64)>>,
}

impl SplitPart {
    fn dataset(&self) -> Result<Dataset<'_, f64>, OrchestratorError> {
        Ok(Dataset::new(&self.ids, &self.packs, &self.labels)?)
    }
}

#[derive(Default)]
struct SplitData {
    class_names: Vec<String>,
    text_dim: usize,
    image_dim: usize,
    parts: BTreeMap<Split, SplitPart>,
}

impl SplitData {
    fn part(&self, split: Split) -> Result<&SplitPart, OrchestratorError> {
        self.parts
            .get(&split)
            .filter(|p| !p.ids.is_empty())
            .ok_or_else(|| OrchestratorError::Stage {
                stage: "data".into(),
                reason: format!("split {split} is empty"),
            })
    }
}

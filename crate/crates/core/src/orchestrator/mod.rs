//! Config-driven experiment runs: baseline composition, staged execution
//! with a resumable manifest, parameter sweeps and report consolidation.

mod compose;
mod config;
mod report;
mod run;
mod services;
mod sweep;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::embedding::EmbeddingError;
use crate::evaluation::EvalError;
use crate::fusion::FusionError;
use crate::generation::GenerationError;
use crate::prompting::PromptError;
use crate::tensorcore::TensorError;
use crate::training::TrainError;

pub use compose::{
    compose_input, ComposeHelpers, ComposedInput, KeywordRetriever, RetrievalDoc, RetrievalStats,
    VisualRequest,
};
pub use config::{
    apply_override, parse_config, parse_config_str, parse_config_table, read_config_table,
    AdapterKind, DatasetConfig, EncoderSpec, EvaluationConfig, ExperimentConfig, GenerationConfig,
    Method, OracleConfig, PromptConfig, ProvidersConfig, RetrievalConfig, RewriterSpec,
    DEFAULT_TRAINING_PRESET,
};
pub use report::{report_cli, ConsolidatedReport, RunSummary};
pub use run::{
    cell_axes, load_manifest, run_experiment, run_experiment_with, ArtifactRef, RunManifest,
    RunOptions, RunOutcome, Stage, StageStatus, COMPONENT_VERSION, MANIFEST_FILE,
};
pub use services::{CallCounts, CountedBackend, CountedRewriter, Services};
pub use sweep::{
    run_sweep, run_sweep_with, sweep_preset, CellOutcome, SweepAxis, SweepCellSpec, SweepResult,
    SWEEP_PRESETS,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("offline mode forbids remote providers: {}", .0.join(", "))]
    Offline(Vec<String>),
    #[error("missing credential: set {0}")]
    MissingCredential(String),
    #[error("stage {stage} failed: {reason}")]
    Stage { stage: String, reason: String },
    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: String, reason: String },
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

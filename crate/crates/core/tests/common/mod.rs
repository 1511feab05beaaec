#![allow(dead_code)]

use std::path::{Path, PathBuf};

use synthsight_core::orchestrator::{parse_config_str, ExperimentConfig};
use synthsight_core::synthetic::{fixture_corpus, FIXTURE_LABELS};

/// Writes `n` fixture reviews as a JSONL dataset and returns its path.
pub fn write_dataset(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("reviews.jsonl");
    let mut body = String::new();
    for s in fixture_corpus(n, 7) {
        let line =
            serde_json::json!({"id": s.id, "text": s.text, "label": FIXTURE_LABELS[s.label]});
        body.push_str(&line.to_string());
        body.push('\n');
    }
    std::fs::write(&path, body).unwrap();
    path
}

/// A small, fast config. `extra` is appended verbatim and may add tables.
pub fn config_text(dataset: &Path, out: &Path, id: &str, method: &str, extra: &str) -> String {
    format!(
        r#"experiment_id = "{id}"
method = "{method}"
seeds = [0, 1]
concurrency = 2
output_dir = "{out}"

[dataset]
path = "{data}"
fractions = {{ train = 0.5, validation = 0.25, test = 0.25 }}
split_seed = 3

[providers.text]
kind = "hash"
id = "hash-text"
dim = 16

[providers.image]
kind = "hash"
id = "hash-image"
dim = 16

[fusion]
model_dim = 16
heads = 2
hidden_dim = 16
encoder_layers = 1

[training]
preset = "head-default"
max_epochs = 3
patience = 1
batch_size = 8
learning_rate = 0.01

[evaluation]
bootstrap_resamples = 50
heatmap_samples = 2
{extra}
"#,
        out = out.display(),
        data = dataset.display(),
    )
}

pub fn config(dataset: &Path, out: &Path, id: &str, method: &str, extra: &str) -> ExperimentConfig {
    let text = config_text(dataset, out, id, method, extra);
    parse_config_str(&text, out.parent().unwrap_or(out)).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

pub const STUB_GENERATION: &str = r#"
[generation]
backend = "flux-schnell"
"#;

//! Grids of independent, resumable runs over config axes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{apply_override, parse_config_table};
use super::run::{run_experiment, RunOptions, RunOutcome};
use super::OrchestratorError;
use crate::evaluation::{render_report, CellSummary, RenderedReport, ReportCell, ReportLayout};
use crate::orchestrator::{cell_axes, ExperimentConfig};
use crate::util::{atomic_write, bounded_map, path_safe};

/// One swept config key and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted config key, e.g. `generation.steps`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl SweepAxis {
    pub fn new(key: &str, values: Vec<toml::Value>) -> Self {
        Self {
            key: key.to_string(),
            values,
        }
    }

    /// Parses `key=v1,v2,...`; values are read as TOML scalars, falling back
    /// to bare strings.
    pub fn parse(spec: &str) -> Result<Self, OrchestratorError> {
        let (key, values) = spec.split_once('=').ok_or_else(|| {
            OrchestratorError::Sweep(format!("axis `{spec}` is not key=v1,v2,..."))
        })?;
        let values = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(parse_scalar)
            .collect();
        Ok(Self::new(key.trim(), values))
    }
}

fn parse_scalar(v: &str) -> toml::Value {
    format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => format!("{f:e}"),
        other => other.to_string(),
    }
}

pub const SWEEP_PRESETS: [&str; 4] = ["steps", "fusion-lr", "fusion", "backend-strategy"];

/// Named grids and the layout that renders them.
pub fn sweep_preset(name: &str) -> Option<(Vec<SweepAxis>, ReportLayout)> {
    let ints = |v: &[i64]| v.iter().map(|&x| toml::Value::Integer(x)).collect();
    let strs = |v: &[&str]| v.iter().map(|&x| toml::Value::String(x.into())).collect();
    Some(match name {
        "steps" => (
            vec![SweepAxis::new("generation.steps", ints(&[50, 25, 10, 4]))],
            ReportLayout::StepsTable,
        ),
        "fusion-lr" => (
            vec![
                SweepAxis::new("fusion.mechanism", strs(&["F1", "F2"])),
                SweepAxis::new(
                    "training.learning_rate",
                    [1e-5, 3e-5, 5e-5].map(toml::Value::Float).to_vec(),
                ),
            ],
            ReportLayout::FusionLrTable,
        ),
        "fusion" => (
            vec![SweepAxis::new(
                "fusion.mechanism",
                strs(&["F1", "F2", "F3"]),
            )],
            ReportLayout::FusionTable,
        ),
        "backend-strategy" => (
            vec![
                SweepAxis::new(
                    "generation.backend",
                    strs(&["sd15", "sdxl", "sdxl-lightning", "flux-schnell", "dalle3"]),
                ),
                SweepAxis::new("prompt.strategy", strs(&["P1", "P2", "P3", "P4"])),
            ],
            ReportLayout::T2iPromptTable,
        ),
        _ => return None,
    })
}

/// A fully resolved grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCellSpec {
    pub id: String,
    pub overrides: Vec<(String, toml::Value)>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub id: String,
    pub run_dir: PathBuf,
    pub axes: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<CellSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Stages executed in this invocation.
    pub executed: Vec<String>,
    /// Provider calls that passed every cache.
    pub calls: u64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub out_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    /// Combined table over the successful cells, when they form a full grid.
    pub report: Option<RenderedReport>,
    pub report_error: Option<String>,
}

impl SweepResult {
    pub fn failed(&self) -> Vec<&CellOutcome> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }
}

fn expand(
    base: &toml::Table,
    base_dir: &Path,
    axes: &[SweepAxis],
    out_dir: &Path,
) -> Result<Vec<SweepCellSpec>, OrchestratorError> {
    if axes.is_empty() {
        return Err(OrchestratorError::Sweep("no axes given".into()));
    }
    for a in axes {
        if a.values.is_empty() {
            return Err(OrchestratorError::Sweep(format!(
                "axis `{}` has no values",
                a.key
            )));
        }
    }
    let base_id = base
        .get("experiment_id")
        .and_then(|v| v.as_str())
        .unwrap_or("sweep")
        .to_string();
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
    for a in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                a.values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((a.key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let cache = out_dir.join("cache");
    let mut problems = Vec::new();
    let mut cells = Vec::new();
    for overrides in combos {
        let id = path_safe(
            &overrides
                .iter()
                .map(|(k, v)| format!("{}={}", k.rsplit('.').next().unwrap_or(k), value_label(v)))
                .collect::<Vec<_>>()
                .join("_"),
        );
        let mut table = base.clone();
        for (k, v) in &overrides {
            apply_override(&mut table, k, v.clone())?;
        }
        let cell_dir = out_dir.join("cells").join(&id);
        table.insert("experiment_id".into(), format!("{base_id}-{id}").into());
        table.insert(
            "output_dir".into(),
            cell_dir.to_string_lossy().into_owned().into(),
        );
        if !table.contains_key("cache_dir") {
            table.insert(
                "cache_dir".into(),
                cache.to_string_lossy().into_owned().into(),
            );
        }
        match parse_config_table(table, base_dir) {
            Ok(config) => cells.push(SweepCellSpec {
                id,
                overrides,
                config,
            }),
            Err(OrchestratorError::Config(p)) => {
                problems.extend(p.into_iter().map(|m| format!("cell {id}: {m}")))
            }
            Err(e) => return Err(e),
        }
    }
    if !problems.is_empty() {
        return Err(OrchestratorError::Config(problems));
    }
    Ok(cells)
}

/// Expands `axes` over `base` and runs each cell under
/// `<out_dir>/cells/<id>/`, sharing `<out_dir>/cache` unless the base names
/// a cache. Cells are independent runs with their own manifests; a failed
/// cell is recorded and the others proceed. Up to `workers` cells run at
/// once.
pub fn run_sweep(
    base: &toml::Table,
    base_dir: &Path,
    axes: &[SweepAxis],
    layout: ReportLayout,
    out_dir: &Path,
    opts: &RunOptions,
    workers: usize,
) -> Result<SweepResult, OrchestratorError> {
    run_sweep_with(base, base_dir, axes, layout, out_dir, workers, &|cfg| {
        run_experiment(cfg, opts)
    })
}

/// [`run_sweep`] with a caller-supplied cell runner.
pub fn run_sweep_with(
    base: &toml::Table,
    base_dir: &Path,
    axes: &[SweepAxis],
    layout: ReportLayout,
    out_dir: &Path,
    workers: usize,
    run_cell: &(dyn Fn(&ExperimentConfig) -> Result<RunOutcome, OrchestratorError> + Sync),
) -> Result<SweepResult, OrchestratorError> {
    let specs = expand(base, base_dir, axes, out_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let cells: Vec<CellOutcome> = bounded_map(&specs, workers.max(1), |spec| {
        let axes = cell_axes(&spec.config);
        let run_dir = spec.config.output_dir();
        Ok::<_, OrchestratorError>(match run_cell(&spec.config) {
            Ok(o) => CellOutcome {
                id: spec.id.clone(),
                run_dir,
                axes,
                summary: o.summary,
                error: None,
                executed: o.executed.iter().map(|s| s.name().to_string()).collect(),
                calls: o.calls.total(),
            },
            Err(e) => {
                log::error!("sweep cell {} failed: {e}", spec.id);
                CellOutcome {
                    id: spec.id.clone(),
                    run_dir,
                    axes,
                    summary: None,
                    error: Some(e.to_string()),
                    executed: vec![],
                    calls: 0,
                }
            }
        })
    })?;
    let ok: Vec<ReportCell> = specs
        .iter()
        .zip(&cells)
        .filter_map(|(spec, c)| {
            c.summary.clone().map(|summary| ReportCell {
                experiment_id: spec.config.experiment_id.clone(),
                axes: c.axes.clone(),
                summary,
            })
        })
        .collect();
    let (report, report_error) = if ok.is_empty() {
        (None, Some("no cell finished".to_string()))
    } else {
        match render_report(&ok, layout) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let mut text = report.as_ref().map(|r| r.text.clone()).unwrap_or_default();
    if let Some(e) = &report_error {
        text.push_str(&format!("combined table unavailable: {e}\n"));
    }
    for c in cells.iter().filter(|c| c.error.is_some()) {
        text.push_str(&format!(
            "FAILED cell {}: {}\n",
            c.id,
            c.error.as_deref().unwrap_or("")
        ));
    }
    atomic_write(&out_dir.join("sweep_report.txt"), text.as_bytes())?;
    if let Some(r) = &report {
        atomic_write(&out_dir.join("sweep_report.tsv"), r.tsv.as_bytes())?;
        atomic_write(
            &out_dir.join("sweep_records.jsonl"),
            r.records_jsonl().as_bytes(),
        )?;
    }
    let mut index = serde_json::to_vec_pretty(&cells)?;
    index.push(b'\n');
    atomic_write(&out_dir.join("sweep.json"), &index)?;
    Ok(SweepResult {
        out_dir: out_dir.to_path_buf(),
        cells,
        report,
        report_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_reads_scalars() {
        let a = SweepAxis::parse("training.learning_rate=1e-5, 3e-5").unwrap();
        assert_eq!(
            a.values,
            vec![toml::Value::Float(1e-5), toml::Value::Float(3e-5)]
        );
        let b = SweepAxis::parse("fusion.mechanism=F1,F2").unwrap();
        assert_eq!(b.values[1], toml::Value::String("F2".into()));
        assert!(SweepAxis::parse("nothing").is_err());
    }

    #[test]
    fn empty_axis_is_an_error() {
        let base: toml::Table = "experiment_id = \"x\"".parse().unwrap();
        let err = expand(
            &base,
            Path::new("."),
            &[SweepAxis::new("generation.steps", vec![])],
            Path::new("/tmp/x"),
        );
        assert!(matches!(err, Err(OrchestratorError::Sweep(_))));
        assert!(matches!(
            expand(&base, Path::new("."), &[], Path::new("/tmp/x")),
            Err(OrchestratorError::Sweep(_))
        ));
    }

    #[test]
    fn presets_have_the_published_grids() {
        let (axes, layout) = sweep_preset("steps").unwrap();
        assert_eq!(layout, ReportLayout::StepsTable);
        assert_eq!(axes[0].values.len(), 4);
        let (axes, _) = sweep_preset("fusion-lr").unwrap();
        assert_eq!(axes.iter().map(|a| a.values.len()).product::<usize>(), 6);
    }
}

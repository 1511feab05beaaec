//! Consolidation of finished run directories.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::run::{load_manifest, MANIFEST_FILE};
use super::OrchestratorError;
use crate::evaluation::{render_report, RenderedReport, ReportCell, ReportLayout};
use crate::generation::{ledger_totals, CostModel, GeneratedImageRecord, LedgerTotals};
use crate::orchestrator::ExperimentConfig;
use crate::util::read_jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub experiment_id: String,
    pub heatmaps: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ConsolidatedReport {
    pub layout: ReportLayout,
    pub rendered: RenderedReport,
    pub runs: Vec<RunSummary>,
    /// Directories left out, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Images of every included run, per backend.
    pub ledger: Option<LedgerTotals>,
}

impl ConsolidatedReport {
    /// The table followed by the skipped-run and ledger lines.
    pub fn text(&self) -> String {
        let mut out = self.rendered.text.clone();
        if let Some(l) = &self.ledger {
            if self.runs.len() > 1 {
                out.push_str(&format!(
                    "ledger[{}] all runs: {} images, ${:.2}, {:.1} s\n",
                    l.mode,
                    l.total.images,
                    l.total_cost_usd(),
                    l.total_latency_s()
                ));
            }
        }
        for (dir, why) in &self.skipped {
            out.push_str(&format!("skipped {}: {why}\n", dir.display()));
        }
        out
    }
}

/// Sweep output directories stand for their cells.
fn expand_dirs(dirs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for d in dirs {
        let cells = d.join("cells");
        if !d.join(MANIFEST_FILE).exists() && cells.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&cells)
                .map(|rd| {
                    rd.flatten()
                        .map(|e| e.path())
                        .filter(|p| p.is_dir())
                        .collect()
                })
                .unwrap_or_default();
            found.sort();
            out.extend(found);
        } else {
            out.push(d.clone());
        }
    }
    out
}

/// Layout for cells that differ along the given axes.
fn infer_layout(
    cells: &[ReportCell],
    fallback: ReportLayout,
) -> Result<ReportLayout, OrchestratorError> {
    let keys: BTreeSet<&str> = cells
        .iter()
        .flat_map(|c| c.axes.keys().map(String::as_str))
        .collect();
    let varying: BTreeSet<&str> = keys
        .into_iter()
        .filter(|k| {
            let vals: BTreeSet<Option<&String>> = cells.iter().map(|c| c.axes.get(*k)).collect();
            vals.len() > 1
        })
        .collect();
    let within = |allowed: &[&str]| varying.iter().all(|v| allowed.contains(v));
    Ok(if varying.is_empty() {
        fallback
    } else if within(&["fusion"]) {
        ReportLayout::FusionTable
    } else if within(&["steps"]) {
        ReportLayout::StepsTable
    } else if within(&["fusion", "lr"]) {
        ReportLayout::FusionLrTable
    } else if within(&["backend", "strategy"]) {
        ReportLayout::T2iPromptTable
    } else if within(&["method", "dataset", "backend", "strategy", "steps"]) {
        ReportLayout::MainTable
    } else {
        return Err(OrchestratorError::Report(format!(
            "runs differ in {}; pass a layout explicitly",
            varying.into_iter().collect::<Vec<_>>().join(", ")
        )));
    })
}

/// Aggregates finished runs. Unreadable or unfinished runs are reported in
/// `skipped`. With one run and no layout the run's own rendered report is
/// returned unchanged.
pub fn report_cli(
    run_dirs: &[PathBuf],
    layout: Option<ReportLayout>,
) -> Result<ConsolidatedReport, OrchestratorError> {
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    let mut configs: Vec<ExperimentConfig> = Vec::new();
    let mut ledger: Option<LedgerTotals> = None;
    for dir in expand_dirs(run_dirs) {
        let manifest = match load_manifest(&dir) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{}: {e}", dir.display());
                skipped.push((dir, e.to_string()));
                continue;
            }
        };
        if !manifest.is_complete() {
            skipped.push((dir, "run has unfinished stages".into()));
            continue;
        }
        let cell: ReportCell = match std::fs::read(dir.join("cell.json"))
            .map_err(OrchestratorError::from)
            .and_then(|b| serde_json::from_slice(&b).map_err(OrchestratorError::from))
        {
            Ok(c) => c,
            Err(e) => {
                skipped.push((dir, format!("cell.json: {e}")));
                continue;
            }
        };
        let cfg: Option<ExperimentConfig> = std::fs::read(dir.join("config.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let images = dir.join("images.jsonl");
        if let (Some(c), true) = (&cfg, images.exists()) {
            #[derive(Deserialize)]
            struct Entry {
                record: GeneratedImageRecord,
            }
            let records: Vec<GeneratedImageRecord> = read_jsonl::<Entry>(&images)?
                .into_iter()
                .map(|e| e.record)
                .collect();
            if !records.is_empty() {
                let mode = c.evaluation.cost_mode;
                let totals = ledger_totals(&records, &CostModel::published(), mode)?;
                ledger = Some(match ledger {
                    Some(prev) if prev.mode == mode => prev + totals,
                    Some(prev) => {
                        log::warn!("mixed cost modes; keeping {}", prev.mode);
                        prev
                    }
                    None => totals,
                });
            }
        }
        let mut heatmaps: Vec<PathBuf> = std::fs::read_dir(dir.join("heatmaps"))
            .map(|rd| rd.flatten().map(|e| e.path()).collect())
            .unwrap_or_default();
        heatmaps.sort();
        runs.push(RunSummary {
            run_dir: dir.clone(),
            experiment_id: cell.experiment_id.clone(),
            heatmaps,
        });
        if let Some(c) = cfg {
            configs.push(c);
        }
        cells.push(cell);
    }
    if cells.is_empty() {
        return Err(OrchestratorError::Report("no finished runs".into()));
    }
    let fallback = configs
        .first()
        .map_or(ReportLayout::MainTable, |c| c.evaluation.layout);
    if cells.len() == 1 && layout.is_none() {
        let dir = &runs[0].run_dir;
        let text = std::fs::read_to_string(dir.join("report.txt"))?;
        let tsv = std::fs::read_to_string(dir.join("report.tsv"))?;
        let records =
            crate::evaluation::parse_records(&std::fs::read_to_string(dir.join("records.jsonl"))?)?;
        return Ok(ConsolidatedReport {
            layout: fallback,
            rendered: RenderedReport { text, tsv, records },
            runs,
            skipped,
            ledger,
        });
    }
    let layout = match layout {
        Some(l) => l,
        None => infer_layout(&cells, fallback)?,
    };
    let rendered = render_report(&cells, layout)?;
    Ok(ConsolidatedReport {
        layout,
        rendered,
        runs,
        skipped,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::evaluation::CellSummary;

    fn cell(fusion: &str) -> ReportCell {
        let mut axes = BTreeMap::new();
        axes.insert("fusion".to_string(), fusion.to_string());
        axes.insert("method".to_string(), "gen_image".to_string());
        ReportCell {
            experiment_id: fusion.into(),
            axes,
            summary: CellSummary {
                n_seeds: 1,
                accuracy: 0.5,
                macro_f1: 0.5,
                spread: None,
                clip: None,
                cost: None,
            },
        }
    }

    #[test]
    fn layout_follows_the_varying_axis() {
        assert_eq!(
            infer_layout(&[cell("F1"), cell("F2")], ReportLayout::MainTable).unwrap(),
            ReportLayout::FusionTable
        );
        assert_eq!(
            infer_layout(&[cell("F1")], ReportLayout::StepsTable).unwrap(),
            ReportLayout::StepsTable
        );
    }
}

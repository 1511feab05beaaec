use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{population_std, ClipStats, CostSummary, EvalError, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLayout {
    /// Methods by datasets, Acc and Ma-F1 per dataset.
    MainTable,
    /// Backend and prompt strategy rows with Ma-F1 and CLIP columns.
    T2iPromptTable,
    /// One row per fusion mechanism.
    FusionTable,
    /// One row per inference step count, descending.
    StepsTable,
    /// Fusion rows by learning-rate columns.
    FusionLrTable,
}

impl ReportLayout {
    pub fn axes(self) -> &'static [&'static str] {
        match self {
            Self::MainTable => &["method", "dataset"],
            Self::T2iPromptTable => &["backend", "strategy"],
            Self::FusionTable => &["fusion"],
            Self::StepsTable => &["steps"],
            Self::FusionLrTable => &["fusion", "lr"],
        }
    }
}

impl FromStr for ReportLayout {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "main_table" => Ok(Self::MainTable),
            "t2i_prompt_table" => Ok(Self::T2iPromptTable),
            "fusion_table" => Ok(Self::FusionTable),
            "steps_table" => Ok(Self::StepsTable),
            "fusion_lr_table" => Ok(Self::FusionLrTable),
            other => Err(EvalError::Report(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    SeedStd,
    BootstrapStd,
}

impl SpreadKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::SeedStd => "±seed-std",
            Self::BootstrapStd => "±bootstrap-std",
        }
    }

    fn metric_suffix(self) -> &'static str {
        match self {
            Self::SeedStd => "seed_std",
            Self::BootstrapStd => "bootstrap_std",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub kind: SpreadKind,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Seed-aggregated metrics of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_seeds: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub spread: Option<Spread>,
    pub clip: Option<ClipStats>,
    pub cost: Option<CostSummary>,
}

/// Means over seeds. With several seeds the spread is their std; with one
/// seed it is that run's bootstrap std when available.
pub fn summarize_cell(reports: &[EvalReport]) -> Result<CellSummary, EvalError> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let n = reports.len() as f64;
    let spread = if reports.len() > 1 {
        Some(Spread {
            kind: SpreadKind::SeedStd,
            accuracy: population_std(&acc),
            macro_f1: population_std(&f1),
        })
    } else {
        first.bootstrap.as_ref().map(|b| Spread {
            kind: SpreadKind::BootstrapStd,
            accuracy: b.accuracy_std,
            macro_f1: b.macro_f1_std,
        })
    };
    Ok(CellSummary {
        n_seeds: reports.len(),
        accuracy: acc.iter().sum::<f64>() / n,
        macro_f1: f1.iter().sum::<f64>() / n,
        spread,
        clip: first.clip.clone(),
        cost: first.cost.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub experiment_id: String,
    pub axes: BTreeMap<String, String>,
    pub summary: CellSummary,
}

/// One metric value of one cell at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineRecord {
    pub experiment_id: String,
    pub axes: BTreeMap<String, String>,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    /// Aligned plain-text table.
    pub text: String,
    /// Tab-delimited form of the same table.
    pub tsv: String,
    pub records: Vec<MachineRecord>,
}

impl RenderedReport {
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_records(jsonl: &str) -> Result<Vec<MachineRecord>, EvalError> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Report(format!("record {}: {e}", i + 1)))
        })
        .collect()
}

const METHOD_ORDER: [(&str, &str); 6] = [
    ("text_only_B1", "Text-Only"),
    ("textual_expansion_B2", "+ Textual Expansion"),
    ("knowledge_retrieval_B3", "+ Know. Retrieval"),
    ("gen_image", "+ Gen. Image"),
    ("gen_image_fast_B4", "+ Gen. Image (1-step)"),
    ("oracle_image_B5", "+ Oracle Image"),
];

const BACKEND_ORDER: [(&str, &str); 6] = [
    ("sd15", "SD1.5"),
    ("sdxl", "SDXL"),
    ("sdxl-lightning", "SDXL-Lightning"),
    ("flux-schnell", "Flux.1-schnell"),
    ("flux-schnell-b4", "Flux.1-schnell (1 step)"),
    ("dalle3", "DALL-E 3"),
];

const FUSION_ORDER: [(&str, &str); 3] = [
    ("F1", "F1 (Late Fusion via Concat)"),
    ("F2", "F2 (Cross-Attention)"),
    ("F3", "F3 (MMBT-like Deep Fusion)"),
];

fn fusion_key(v: &str) -> &str {
    match v {
        "F1_concat" => "F1",
        "F2_cross_attention" => "F2",
        "F3_deep_prefix" => "F3",
        other => other,
    }
}

/// Sort key: known values in table order, then numbers, then text.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
enum OrderKey {
    Known(usize),
    Number(f64),
    Text(String),
}

fn order_key(axis: &str, value: &str) -> OrderKey {
    let known = |table: &[(&str, &str)], v: &str| table.iter().position(|(k, _)| *k == v);
    let hit = match axis {
        "method" => known(&METHOD_ORDER, value),
        "backend" => known(&BACKEND_ORDER, value),
        "fusion" => known(&FUSION_ORDER, fusion_key(value)),
        "strategy" => ["P1", "P2", "P3", "P4"].iter().position(|p| *p == value),
        _ => None,
    };
    if let Some(i) = hit {
        return OrderKey::Known(i);
    }
    match value.parse::<f64>() {
        // Steps run from most to fewest.
        Ok(x) if axis == "steps" => OrderKey::Number(-x),
        Ok(x) => OrderKey::Number(x),
        Err(_) => OrderKey::Text(value.to_string()),
    }
}

fn display(axis: &str, value: &str) -> String {
    let table: &[(&str, &str)] = match axis {
        "method" => &METHOD_ORDER,
        "backend" => &BACKEND_ORDER,
        "fusion" => &FUSION_ORDER,
        _ => &[],
    };
    let key = if axis == "fusion" {
        fusion_key(value)
    } else {
        value
    };
    table
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, d)| d.to_string())
        .unwrap_or_else(|| value.to_string())
}

fn sorted_values(cells: &[&ReportCell], axis: &str) -> Vec<String> {
    let set: BTreeSet<&str> = cells.iter().map(|c| c.axes[axis].as_str()).collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    v.sort_by(|a, b| {
        order_key(axis, a)
            .partial_cmp(&order_key(axis, b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    v
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    /// Per column, the numeric value used for best-flagging.
    scores: Vec<Vec<Option<f64>>>,
}

impl Table {
    fn flag_best(&mut self) {
        for col in 0..self.header.len() {
            let best = self
                .scores
                .iter()
                .filter_map(|r| r[col])
                .fold(f64::NEG_INFINITY, f64::max);
            if !best.is_finite() {
                continue;
            }
            for (row, scores) in self.rows.iter_mut().zip(&self.scores) {
                if scores[col] == Some(best) {
                    row[col].push_str(" *");
                }
            }
        }
    }

    fn render(&self, footer: &[String]) -> (String, String) {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header[c])
                    .chain(self.rows.iter().map(|r| &r[c]))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str(" | ");
                }
                let pad = w - cell.chars().count();
                if i == 0 {
                    s.push_str(cell);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(cell);
                }
            }
            s.trim_end().to_string()
        };
        let mut text = line(&self.header);
        text.push('\n');
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        text.push_str(&rule.join("-+-"));
        text.push('\n');
        for r in &self.rows {
            text.push_str(&line(r));
            text.push('\n');
        }
        for f in footer {
            text.push_str(f);
            text.push('\n');
        }
        let mut tsv = self.header.join("\t");
        tsv.push('\n');
        for r in &self.rows {
            tsv.push_str(&r.join("\t"));
            tsv.push('\n');
        }
        (text, tsv)
    }
}

fn with_spread(value: f64, spread: Option<f64>) -> String {
    match spread {
        Some(s) => format!("{} (±{})", pct(value), pct(s)),
        None => pct(value),
    }
}

fn metric_records(cell: &ReportCell) -> Vec<MachineRecord> {
    let s = &cell.summary;
    let mut metrics: Vec<(String, f64)> = vec![
        ("accuracy".into(), s.accuracy),
        ("macro_f1".into(), s.macro_f1),
        ("n_seeds".into(), s.n_seeds as f64),
    ];
    if let Some(sp) = &s.spread {
        metrics.push((format!("accuracy_{}", sp.kind.metric_suffix()), sp.accuracy));
        metrics.push((format!("macro_f1_{}", sp.kind.metric_suffix()), sp.macro_f1));
    }
    if let Some(c) = &s.clip {
        metrics.push(("clip_cosine_mean".into(), c.cosine_mean));
        metrics.push(("clip_cosine_std".into(), c.cosine_std));
        metrics.push(("clip_score_mean".into(), c.score_mean));
        metrics.push(("clip_score_std".into(), c.score_std));
    }
    if let Some(c) = &s.cost {
        metrics.push(("images".into(), c.images as f64));
        metrics.push(("total_cost_usd".into(), c.total_cost_usd));
        metrics.push(("total_latency_s".into(), c.total_latency_s));
    }
    metrics
        .into_iter()
        .map(|(metric, value)| MachineRecord {
            experiment_id: cell.experiment_id.clone(),
            axes: cell.axes.clone(),
            metric,
            value,
        })
        .collect()
}

/// Renders `cells` in `layout`. Every cell must carry the layout's axes;
/// grid layouts need every axis combination present exactly once.
pub fn render_report(
    cells: &[ReportCell],
    layout: ReportLayout,
) -> Result<RenderedReport, EvalError> {
    if cells.is_empty() {
        return Err(EvalError::Report("no cells".into()));
    }
    let axes = layout.axes();
    for c in cells {
        for a in axes {
            if !c.axes.contains_key(*a) {
                return Err(EvalError::Report(format!(
                    "cell {} lacks axis `{a}`",
                    c.experiment_id
                )));
            }
        }
    }
    let refs: Vec<&ReportCell> = cells.iter().collect();
    let key = |c: &ReportCell| axes.iter().map(|a| c.axes[*a].clone()).collect::<Vec<_>>();
    let mut index: BTreeMap<Vec<String>, &ReportCell> = BTreeMap::new();
    for c in &refs {
        if index.insert(key(c), c).is_some() {
            return Err(EvalError::Report(format!(
                "duplicate cell for {:?}",
                key(c)
            )));
        }
    }
    let kinds: BTreeSet<&'static str> = cells
        .iter()
        .filter_map(|c| c.summary.spread.as_ref().map(|s| s.kind.label()))
        .collect();
    let mut footer = Vec::new();
    if !kinds.is_empty() {
        let seeds: BTreeSet<usize> = cells.iter().map(|c| c.summary.n_seeds).collect();
        footer.push(format!(
            "(±) dispersion: {}; seeds per cell: {}",
            kinds.into_iter().collect::<Vec<_>>().join(", "),
            seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    footer.push("* best in column".to_string());

    let mut ordered: Vec<&ReportCell> = Vec::new();
    let mut table = match layout {
        ReportLayout::MainTable | ReportLayout::FusionLrTable => {
            let (row_axis, col_axis) = (axes[0], axes[1]);
            let rows = sorted_values(&refs, row_axis);
            let cols = sorted_values(&refs, col_axis);
            let main = layout == ReportLayout::MainTable;
            let mut header = vec![if main {
                "Method".to_string()
            } else {
                "Fusion".to_string()
            }];
            for c in &cols {
                if main {
                    header.push(format!("{c} Acc"));
                    header.push(format!("{c} Ma-F1"));
                } else {
                    header.push(format!("LR={c}"));
                }
            }
            let mut t = Table {
                header,
                rows: vec![],
                scores: vec![],
            };
            for r in &rows {
                let mut row = vec![display(row_axis, r)];
                let mut scores = vec![None];
                for c in &cols {
                    let cell = index.get(&vec![r.clone(), c.clone()]).ok_or_else(|| {
                        EvalError::Report(format!("missing cell {row_axis}={r}, {col_axis}={c}"))
                    })?;
                    ordered.push(cell);
                    let s = &cell.summary;
                    if main {
                        row.push(pct(s.accuracy));
                        row.push(pct(s.macro_f1));
                        scores.push(Some(s.accuracy));
                        scores.push(Some(s.macro_f1));
                    } else {
                        row.push(with_spread(
                            s.macro_f1,
                            s.spread.as_ref().map(|x| x.macro_f1),
                        ));
                        scores.push(Some(s.macro_f1));
                    }
                }
                t.rows.push(row);
                t.scores.push(scores);
            }
            t
        }
        ReportLayout::T2iPromptTable => {
            let mut keys: Vec<&Vec<String>> = index.keys().collect();
            keys.sort_by(|a, b| {
                (order_key("backend", &a[0]), order_key("strategy", &a[1]))
                    .partial_cmp(&(order_key("backend", &b[0]), order_key("strategy", &b[1])))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(b))
            });
            let mut t = Table {
                header: [
                    "Model",
                    "Strategy",
                    "Ma-F1 (%)",
                    "CLIP cosine",
                    "CLIP score",
                ]
                .map(String::from)
                .to_vec(),
                rows: vec![],
                scores: vec![],
            };
            for k in keys {
                let cell = index[k];
                ordered.push(cell);
                let s = &cell.summary;
                let (cos, score) = match &s.clip {
                    Some(c) => (
                        format!("{:.2} (±{:.2})", c.cosine_mean, c.cosine_std),
                        format!("{:.2} (±{:.2})", c.score_mean, c.score_std),
                    ),
                    None => ("-".into(), "-".into()),
                };
                t.rows.push(vec![
                    display("backend", &k[0]),
                    k[1].clone(),
                    with_spread(s.macro_f1, s.spread.as_ref().map(|x| x.macro_f1)),
                    cos,
                    score,
                ]);
                t.scores.push(vec![
                    None,
                    None,
                    Some(s.macro_f1),
                    s.clip.as_ref().map(|c| c.cosine_mean),
                    s.clip.as_ref().map(|c| c.score_mean),
                ]);
            }
            t
        }
        ReportLayout::FusionTable | ReportLayout::StepsTable => {
            let axis = axes[0];
            let first = if axis == "fusion" {
                "Fusion Mechanism"
            } else {
                "Inference Steps"
            };
            let mut t = Table {
                header: [first, "Acc (%)", "Ma-F1 (%)"].map(String::from).to_vec(),
                rows: vec![],
                scores: vec![],
            };
            for v in sorted_values(&refs, axis) {
                let cell = index[&vec![v.clone()]];
                ordered.push(cell);
                let s = &cell.summary;
                let sp = s.spread.as_ref();
                t.rows.push(vec![
                    display(axis, &v),
                    with_spread(s.accuracy, sp.map(|x| x.accuracy)),
                    with_spread(s.macro_f1, sp.map(|x| x.macro_f1)),
                ]);
                t.scores
                    .push(vec![None, Some(s.accuracy), Some(s.macro_f1)]);
            }
            t
        }
    };
    table.flag_best();
    let (text, tsv) = table.render(&footer);
    let records = ordered.iter().flat_map(|c| metric_records(c)).collect();
    let mut out = RenderedReport { text, tsv, records };
    // Cost lines, when any cell carries one.
    let costs: Vec<&ReportCell> = ordered
        .iter()
        .copied()
        .filter(|c| c.summary.cost.is_some())
        .collect();
    if !costs.is_empty() {
        out.text.push('\n');
        for c in costs {
            let cost = c.summary.cost.as_ref().unwrap();
            let _ = writeln!(
                out.text,
                "cost[{}] {}: {} images, ${:.2}, {:.1} s",
                cost.mode, c.experiment_id, cost.images, cost.total_cost_usd, cost.total_latency_s
            );
        }
    }
    Ok(out)
}

//! Classification metrics, confusion matrices, bootstrap dispersion and
//! report tables.

mod report;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{
    parse_records, render_report, summarize_cell, CellSummary, MachineRecord, RenderedReport,
    ReportCell, ReportLayout, Spread, SpreadKind,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("need at least 2 resamples, got {0}")]
    Resamples(usize),
    #[error("report: {0}")]
    Report(String),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub truth: usize,
    pub predicted: usize,
    #[serde(default)]
    pub logits: Vec<f64>,
}

impl Prediction {
    /// Prediction taken as the argmax of `logits`.
    pub fn from_logits(sample_id: impl Into<String>, truth: usize, logits: Vec<f64>) -> Self {
        Self {
            sample_id: sample_id.into(),
            truth,
            predicted: argmax(&logits),
            logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub class_names: Vec<String>,
    pub items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(class_names: Vec<String>, items: Vec<Prediction>) -> Result<Self, EvalError> {
        let classes = class_names.len();
        let mut ids = HashSet::with_capacity(items.len());
        for p in &items {
            for label in [p.truth, p.predicted] {
                if label >= classes {
                    return Err(EvalError::LabelOutOfRange { label, classes });
                }
            }
            if !ids.insert(p.sample_id.as_str()) {
                return Err(EvalError::DuplicateId(p.sample_id.clone()));
            }
        }
        Ok(Self { class_names, items })
    }

    /// Unnamed classes `c0..c{n-1}`.
    pub fn with_classes(classes: usize, items: Vec<Prediction>) -> Result<Self, EvalError> {
        Self::new((0..classes).map(|c| format!("c{c}")).collect(), items)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]`: true class `i` predicted as `j`.
    pub counts: Vec<Vec<u64>>,
    /// Rows divided by their sums; zero-support rows stay zero.
    pub normalized: Vec<Vec<f64>>,
    pub zero_support_rows: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub resamples: usize,
    pub seed: u64,
    pub accuracy_std: f64,
    pub macro_f1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub n: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub cosine_mean: f64,
    pub cosine_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub images: u64,
    pub total_cost_usd: f64,
    pub total_latency_s: f64,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSummary>,
    #[serde(default)]
    pub clip: Option<ClipStats>,
    #[serde(default)]
    pub cost: Option<CostSummary>,
}

impl EvalReport {
    pub fn zero_support_classes(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .filter(|c| c.support == 0)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn counts_from(pairs: impl Iterator<Item = (usize, usize)>, classes: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; classes]; classes];
    for (t, p) in pairs {
        counts[t][p] += 1;
    }
    counts
}

pub fn confusion_matrix(preds: &PredictionSet) -> Result<ConfusionMatrix, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let counts = counts_from(
        preds.items.iter().map(|p| (p.truth, p.predicted)),
        preds.num_classes(),
    );
    Ok(normalize(counts))
}

fn normalize(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
    let mut zero_support_rows = Vec::new();
    let normalized = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                zero_support_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    ConfusionMatrix {
        counts,
        normalized,
        zero_support_rows,
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class metrics, accuracy and macro-F1 from confusion counts. 0/0 is 0.
fn metrics_from_counts(counts: &[Vec<u64>], names: &[String]) -> (f64, f64, Vec<ClassMetrics>) {
    let classes = counts.len();
    let total: u64 = counts.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|i| counts[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = counts[c][c];
            let support: u64 = counts[c].iter().sum();
            let predicted: u64 = counts.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: names[c].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
    (ratio(correct, total), macro_f1, per_class)
}

pub fn compute_metrics(preds: &PredictionSet) -> Result<EvalReport, EvalError> {
    let confusion = confusion_matrix(preds)?;
    let (accuracy, macro_f1, per_class) =
        metrics_from_counts(&confusion.counts, &preds.class_names);
    Ok(EvalReport {
        n: preds.len(),
        accuracy,
        macro_f1,
        per_class,
        confusion,
        bootstrap: None,
        clip: None,
        cost: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Standard deviation of `metric` over seeded with-replacement resamples.
///
/// Predictions are ordered by sample id before resampling, so the result
/// does not depend on the order of `preds.items`. Resample `r` draws
/// `n` indices with `random_range(0..n)` from one ChaCha8 stream seeded
/// with `seed`, resamples drawn consecutively.
pub fn bootstrap_std(
    preds: &PredictionSet,
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let values: Vec<f64> = bootstrap_values(preds, resamples, seed)?
        .into_iter()
        .map(|(a, f)| match metric {
            Metric::Accuracy => a,
            Metric::MacroF1 => f,
        })
        .collect();
    Ok(population_std(&values))
}

/// Both metrics' bootstrap std from one resample stream.
pub fn bootstrap_summary(
    preds: &PredictionSet,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary, EvalError> {
    let values = bootstrap_values(preds, resamples, seed)?;
    let acc: Vec<f64> = values.iter().map(|v| v.0).collect();
    let f1: Vec<f64> = values.iter().map(|v| v.1).collect();
    Ok(BootstrapSummary {
        resamples,
        seed,
        accuracy_std: population_std(&acc),
        macro_f1_std: population_std(&f1),
    })
}

fn bootstrap_values(
    preds: &PredictionSet,
    resamples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if resamples < 2 {
        return Err(EvalError::Resamples(resamples));
    }
    let mut sorted: Vec<&Prediction> = preds.items.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let n = sorted.len();
    let classes = preds.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let counts = counts_from(
            (0..n).map(|_| {
                let p = sorted[rng.random_range(0..n)];
                (p.truth, p.predicted)
            }),
            classes,
        );
        let (acc, f1, _) = metrics_from_counts(&counts, &preds.class_names);
        out.push((acc, f1));
    }
    Ok(out)
}

/// Arithmetic mean and population std of the scores.
pub fn clip_score_stats<R>(records: &[(R, f64)]) -> Result<(f64, f64), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores: Vec<f64> = records.iter().map(|r| r.1).collect();
    Ok((
        scores.iter().sum::<f64>() / scores.len() as f64,
        population_std(&scores),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(truth: &[usize], pred: &[usize], classes: usize) -> PredictionSet {
        let items = truth
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&t, &p))| Prediction {
                sample_id: format!("s{i}"),
                truth: t,
                predicted: p,
                logits: vec![],
            })
            .collect();
        PredictionSet::with_classes(classes, items).unwrap()
    }

    #[test]
    fn perfect_and_flipped() {
        let r = compute_metrics(&set(&[0, 1, 1, 0], &[0, 1, 1, 0], 2)).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
        assert_eq!(r.confusion.counts, vec![vec![2, 0], vec![0, 2]]);
        let r = compute_metrics(&set(&[0, 1, 1, 0], &[1, 0, 0, 1], 2)).unwrap();
        assert_eq!(r.macro_f1, 0.0);
    }

    #[test]
    fn zero_support_rows_are_flagged() {
        let r = compute_metrics(&set(&[0], &[1], 3)).unwrap();
        assert_eq!(r.confusion.counts[0][1], 1);
        assert_eq!(r.confusion.zero_support_rows, vec![1, 2]);
        assert_eq!(r.zero_support_classes(), vec!["c1", "c2"]);
        assert_eq!(r.confusion.normalized[1], vec![0.0; 3]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let s = set(&[1; 20], &[1; 20], 2);
        assert_eq!(bootstrap_std(&s, Metric::Accuracy, 100, 3).unwrap(), 0.0);
        let s = set(&[0, 1, 0, 1, 1, 0, 0, 1], &[0, 1, 1, 1, 0, 0, 0, 0], 2);
        let a = bootstrap_std(&s, Metric::MacroF1, 200, 9).unwrap();
        assert_eq!(a, bootstrap_std(&s, Metric::MacroF1, 200, 9).unwrap());
        assert!(a > 0.0);
        assert!(matches!(
            bootstrap_std(&s, Metric::Accuracy, 1, 0),
            Err(EvalError::Resamples(1))
        ));
    }

    #[test]
    fn clip_stats_cases() {
        assert_eq!(clip_score_stats(&[((), 0.32)]).unwrap(), (0.32, 0.0));
        assert_eq!(
            clip_score_stats(&[((), 0.0), ((), 2.5)]).unwrap(),
            (1.25, 1.25)
        );
        assert!(clip_score_stats::<()>(&[]).is_err());
    }
}

//! Per-image rates and ledger arithmetic. Amounts are summed as integer
//! micro-dollars and microseconds so totals are exact and associative.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GeneratedImageRecord, GenerationError, LedgerEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Per-image rates from the cost model.
    #[default]
    Estimated,
    /// Wall-clock latency and provider-reported cost as recorded.
    Measured,
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Estimated => "estimated",
            CostMode::Measured => "measured",
        })
    }
}

impl FromStr for CostMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "estimated" => Ok(CostMode::Estimated),
            "measured" => Ok(CostMode::Measured),
            other => Err(format!(
                "unknown cost mode `{other}` (expected estimated or measured)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub unit_cost_usd: f64,
    pub nominal_latency_s: f64,
    /// Absent when the provider chooses the step count.
    pub nominal_steps: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostModel {
    entries: BTreeMap<String, CostEntry>,
}

impl CostModel {
    pub fn new(entries: BTreeMap<String, CostEntry>) -> Result<Self, GenerationError> {
        let model = Self { entries };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let mut problems = Vec::new();
        for (id, e) in &self.entries {
            if !(e.unit_cost_usd > 0.0 && e.unit_cost_usd.is_finite()) {
                problems.push(format!("{id}: unit cost must be positive"));
            }
            if !(e.nominal_latency_s > 0.0 && e.nominal_latency_s.is_finite()) {
                problems.push(format!("{id}: nominal latency must be positive"));
            }
            if e.nominal_steps == Some(0) {
                problems.push(format!("{id}: nominal steps must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GenerationError::InvalidParams(problems))
        }
    }

    pub fn get(&self, backend_id: &str) -> Option<&CostEntry> {
        self.entries.get(backend_id)
    }

    pub fn insert(&mut self, backend_id: impl Into<String>, entry: CostEntry) {
        self.entries.insert(backend_id.into(), entry);
    }

    /// Published per-image API rates. The B4 variant bills at the Flux
    /// rate with a single step.
    pub fn published() -> Self {
        let rows: [(&str, f64, f64, Option<u32>); 6] = [
            ("sd15", 0.008, 3.0, Some(50)),
            ("sdxl", 0.022, 5.0, Some(50)),
            ("sdxl-lightning", 0.006, 1.2, Some(4)),
            ("flux-schnell", 0.004, 0.8, Some(4)),
            ("flux-schnell-b4", 0.004, 0.8, Some(1)),
            ("dalle3", 0.040, 8.0, None),
        ];
        Self {
            entries: rows
                .into_iter()
                .map(|(id, cost, latency, steps)| {
                    (
                        id.to_string(),
                        CostEntry {
                            unit_cost_usd: cost,
                            nominal_latency_s: latency,
                            nominal_steps: steps,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::published()
    }
}

/// Anything that can be billed: image records and ledger entries.
pub trait Billable {
    fn backend_id(&self) -> &str;
    fn latency_s(&self) -> f64;
    fn cost_usd(&self) -> f64;
}

impl Billable for GeneratedImageRecord {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }
    fn latency_s(&self) -> f64 {
        self.latency_s
    }
    fn cost_usd(&self) -> f64 {
        self.cost_usd
    }
}

impl Billable for LedgerEntry {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }
    fn latency_s(&self) -> f64 {
        self.latency_s
    }
    fn cost_usd(&self) -> f64 {
        self.cost_usd
    }
}

fn micros(x: f64) -> u64 {
    (x.max(0.0) * 1e6).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackendTotals {
    pub images: u64,
    pub cost_micro_usd: u64,
    pub latency_us: u64,
}

impl BackendTotals {
    pub fn cost_usd(&self) -> f64 {
        self.cost_micro_usd as f64 / 1e6
    }

    pub fn latency_s(&self) -> f64 {
        self.latency_us as f64 / 1e6
    }
}

impl Add for BackendTotals {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            images: self.images + o.images,
            cost_micro_usd: self.cost_micro_usd + o.cost_micro_usd,
            latency_us: self.latency_us + o.latency_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub mode: CostMode,
    pub total: BackendTotals,
    pub per_backend: BTreeMap<String, BackendTotals>,
}

impl LedgerTotals {
    pub fn total_cost_usd(&self) -> f64 {
        self.total.cost_usd()
    }

    pub fn total_latency_s(&self) -> f64 {
        self.total.latency_s()
    }
}

impl Add for LedgerTotals {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self.total = self.total + o.total;
        for (id, t) in o.per_backend {
            let e = self.per_backend.entry(id).or_default();
            *e = *e + t;
        }
        self
    }
}

/// Sums a ledger. Estimated mode bills each image at its backend's rate
/// and fails on backends missing from the model; measured mode sums the
/// recorded values.
pub fn ledger_totals<B: Billable>(
    ledger: &[B],
    model: &CostModel,
    mode: CostMode,
) -> Result<LedgerTotals, GenerationError> {
    let mut out = LedgerTotals {
        mode,
        ..LedgerTotals::default()
    };
    for item in ledger {
        let (cost, latency) = match mode {
            CostMode::Estimated => {
                let e = model.get(item.backend_id()).ok_or_else(|| {
                    GenerationError::UnknownBackend(item.backend_id().to_string())
                })?;
                (e.unit_cost_usd, e.nominal_latency_s)
            }
            CostMode::Measured => (item.cost_usd(), item.latency_s()),
        };
        let t = BackendTotals {
            images: 1,
            cost_micro_usd: micros(cost),
            latency_us: micros(latency),
        };
        out.total = out.total + t;
        let e = out
            .per_backend
            .entry(item.backend_id().to_string())
            .or_default();
        *e = *e + t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Item(&'static str, f64, f64);
    impl Billable for Item {
        fn backend_id(&self) -> &str {
            self.0
        }
        fn latency_s(&self) -> f64 {
            self.1
        }
        fn cost_usd(&self) -> f64 {
            self.2
        }
    }

    #[test]
    fn empty_ledger_is_zero() {
        let t = ledger_totals::<Item>(&[], &CostModel::published(), CostMode::Estimated).unwrap();
        assert_eq!(t.total_cost_usd(), 0.0);
        assert_eq!(t.total_latency_s(), 0.0);
        assert!(t.per_backend.is_empty());
    }

    #[test]
    fn mixed_backends() {
        let mut items: Vec<Item> = (0..10).map(|_| Item("sdxl", 0.0, 0.0)).collect();
        items.extend((0..10).map(|_| Item("dalle3", 0.0, 0.0)));
        let t = ledger_totals(&items, &CostModel::published(), CostMode::Estimated).unwrap();
        assert_eq!(t.total_cost_usd(), 0.62);
        assert_eq!(t.total_latency_s(), 130.0);
        assert_eq!(t.per_backend["sdxl"].images, 10);
    }

    #[test]
    fn estimate_mode_rejects_unknown_backend() {
        let r = ledger_totals(
            &[Item("midjourney", 1.0, 1.0)],
            &CostModel::published(),
            CostMode::Estimated,
        );
        assert!(matches!(r, Err(GenerationError::UnknownBackend(_))));
        let m = ledger_totals(
            &[Item("midjourney", 1.5, 0.25)],
            &CostModel::published(),
            CostMode::Measured,
        )
        .unwrap();
        assert_eq!(m.total_cost_usd(), 0.25);
        assert_eq!(m.total_latency_s(), 1.5);
    }

    #[test]
    fn model_rejects_nonpositive_rates() {
        let mut m = BTreeMap::new();
        m.insert(
            "x".to_string(),
            CostEntry {
                unit_cost_usd: 0.0,
                nominal_latency_s: 1.0,
                nominal_steps: Some(0),
            },
        );
        assert!(CostModel::new(m).is_err());
    }
}

//! AdamW, the early-stopping training loop and split evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{compute_metrics, EvalError, EvalReport, Prediction, PredictionSet};
use crate::fusion::{FusionError, FusionHead, PreparedPack};
use crate::tensorcore::{write_checkpoint, ParamStore, Real};
use crate::util::write_jsonl;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("NaN gradient in `{param}` at step {step}")]
    NanGradient { param: String, step: u64 },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{packs} packs but {labels} labels")]
    LabelCount { packs: usize, labels: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global-norm gradient clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune_reference()
    }
}

impl TrainConfig {
    /// lr 2e-5, batch 32, weight decay 0.01, 5 epochs, patience 2.
    pub fn finetune_reference() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            weight_decay: 0.01,
            max_epochs: 5,
            patience: 2,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: None,
        }
    }

    /// The same protocol with lr 1e-3, suited to training a head over
    /// frozen features.
    pub fn head_default() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::finetune_reference()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-appendix-b" => Some(Self::finetune_reference()),
            "head-default" => Some(Self::head_default()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("weight_decay must be non-negative".to_string());
        }
        if self.max_epochs == 0 {
            problems.push("max_epochs must be positive".to_string());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            problems.push(format!(
                "patience must be in 1..={}, got {}",
                self.max_epochs, self.patience
            ));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            problems.push("betas must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("eps must be positive".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                problems.push("grad_clip must be positive".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// One decoupled-weight-decay Adam update at step `t >= 1`.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    cfg: &TrainConfig,
    t: u64,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        if p.grad.data().iter().any(|g| g.as_f64().is_nan()) {
            return Err(TrainError::NanGradient {
                param: name.to_string(),
                step: t,
            });
        }
    }
    let clip_scale = match cfg.grad_clip {
        Some(max) => {
            let norm = params.global_grad_norm().as_f64();
            if norm > max {
                T::lit(max / norm)
            } else {
                T::one()
            }
        }
        None => T::one(),
    };
    let (b1, b2) = (T::lit(cfg.betas.0), T::lit(cfg.betas.1));
    let one = T::one();
    let step = t.max(1) as i32;
    let c1 = T::lit(1.0 - cfg.betas.0.powi(step));
    let c2 = T::lit(1.0 - cfg.betas.1.powi(step));
    let (lr, wd, eps) = (
        T::lit(cfg.learning_rate),
        T::lit(cfg.weight_decay),
        T::lit(cfg.eps),
    );
    for (_, p) in params.iter_mut() {
        let n = p.value.data().len();
        for i in 0..n {
            let g = p.grad.data()[i] * clip_scale;
            let m = b1 * p.m.data()[i] + (one - b1) * g;
            let v = b2 * p.v.data()[i] + (one - b2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            let theta = p.value.data()[i];
            p.value.data_mut()[i] = theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
        }
    }
    Ok(())
}

/// Packs and labels of one split.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a, T> {
    pub ids: &'a [String],
    pub packs: &'a [PreparedPack<T>],
    pub labels: &'a [usize],
}

impl<'a, T> Dataset<'a, T> {
    pub fn new(
        ids: &'a [String],
        packs: &'a [PreparedPack<T>],
        labels: &'a [usize],
    ) -> Result<Self, TrainError> {
        if packs.len() != labels.len() || ids.len() != labels.len() {
            return Err(TrainError::LabelCount {
                packs: packs.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { ids, packs, labels })
    }

    pub fn len(&self) -> usize {
        self.packs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packs.is_empty()
    }
}

/// Supplies validation accuracy and Macro-F1 after each epoch.
pub trait Validator<T> {
    fn validate(&mut self, head: &FusionHead<T>, epoch: usize) -> Result<(f64, f64), TrainError>;
}

/// Scores a held-out split.
pub struct SplitValidator<'a, T> {
    pub data: Dataset<'a, T>,
    pub class_names: Vec<String>,
}

impl<T: Real> Validator<T> for SplitValidator<'_, T> {
    fn validate(&mut self, head: &FusionHead<T>, _epoch: usize) -> Result<(f64, f64), TrainError> {
        let out = evaluate_split(head, &self.data, &self.class_names)?;
        Ok((out.report.accuracy, out.report.macro_f1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_macro_f1: f64,
    pub best_epoch: usize,
    /// Checkpoint of the best parameters, when a directory was given.
    pub best_params: Option<PathBuf>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains `head` with seeded per-epoch shuffling, AdamW and early stopping
/// on validation Macro-F1. Returns the head restored to its best epoch
/// (strict improvement, so ties keep the earlier epoch).
pub fn train_loop<T: Real>(
    mut head: FusionHead<T>,
    train: Dataset<'_, T>,
    validator: &mut dyn Validator<T>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(FusionHead<T>, TrainState), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training split"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD50F_0A7E_5EED_0001);
    let use_dropout = head.config().dropout > 0.0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut state = TrainState {
        epoch: 0,
        best_val_macro_f1: f64::NEG_INFINITY,
        best_epoch: 0,
        best_params: None,
        epochs_since_improvement: 0,
        history: Vec::new(),
        stopped_early: false,
    };
    let mut best: Option<ParamStore<T>> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let packs: Vec<&PreparedPack<T>> = batch.iter().map(|&i| &train.packs[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let rng = if use_dropout {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let loss = head.loss_and_grad(&packs, &labels, rng)?;
            step += 1;
            adamw_step(&mut head.params, cfg, step)?;
            loss_sum += loss.as_f64() * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_acc, val_macro_f1) = validator.validate(&head, epoch)?;
        let improved = val_macro_f1 > state.best_val_macro_f1;
        if improved {
            state.best_val_macro_f1 = val_macro_f1;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best = Some(head.params.values_snapshot());
        } else {
            state.epochs_since_improvement += 1;
        }
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            val_macro_f1,
            improved,
        });
        log::debug!(
            "epoch {epoch}: loss {train_loss:.5} val acc {val_acc:.4} f1 {val_macro_f1:.4}"
        );
        if state.epochs_since_improvement == cfg.patience {
            state.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if let Some(best) = best {
        head.params
            .copy_values_from(&best)
            .map_err(FusionError::from)?;
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("best.ckpt");
        let mut buf = Vec::new();
        write_checkpoint(&head.params, &mut buf)?;
        crate::util::atomic_write(&path, &buf)?;
        state.best_params = Some(path);
    }
    Ok((head, state))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    Ok(write_jsonl(path, history)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub report: EvalReport,
    /// Per-sample logits and predictions, for reports and bootstrap.
    pub predictions: PredictionSet,
}

pub fn evaluate_split<T: Real>(
    head: &FusionHead<T>,
    data: &Dataset<'_, T>,
    class_names: &[String],
) -> Result<SplitOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("evaluation split"));
    }
    let mut items = Vec::with_capacity(data.len());
    for ((id, pack), &label) in data.ids.iter().zip(data.packs).zip(data.labels) {
        let logits = head.logits(pack)?;
        let values: Vec<f64> = logits.row(0).iter().map(|v| v.as_f64()).collect();
        items.push(Prediction::from_logits(id.clone(), label, values));
    }
    let predictions = PredictionSet::new(class_names.to_vec(), items)?;
    let report = compute_metrics(&predictions)?;
    Ok(SplitOutcome {
        report,
        predictions,
    })
}

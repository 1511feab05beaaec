//! Generated datasets with known structure.
//!
//! The separability set has four classes `y = 2a + b`. Bit `a` is carried
//! only by the text tokens and bit `b` only by the image tokens, so a
//! text-only model cannot exceed 50% accuracy while a fused model can
//! approach 100%. Validation samples come in pairs that share their text
//! and differ in `b`; a text-only model therefore scores at most one of
//! each pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::TextSample;
use crate::embedding::{EmbeddingError, EmbeddingVector, FeaturePack};
use crate::fusion::{FusionConfig, FusionError, FusionHead, PreparedPack};
use crate::training::{
    evaluate_split, train_loop, Dataset, SplitValidator, TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityConfig {
    pub train_samples: usize,
    /// Validation pairs; the split holds twice as many samples.
    pub val_pairs: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub text_tokens: usize,
    pub image_tokens: usize,
    /// Magnitude of the class signal along its direction.
    pub signal: f64,
    /// Std of the Gaussian noise added to every coordinate.
    pub noise: f64,
    /// Replace image tokens with pure standard-normal noise.
    pub image_noise_only: bool,
    pub seed: u64,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        Self {
            train_samples: 800,
            val_pairs: 2000,
            text_dim: 8,
            image_dim: 8,
            text_tokens: 4,
            image_tokens: 4,
            signal: 1.0,
            noise: 0.5,
            image_noise_only: false,
            seed: 0,
        }
    }
}

/// One generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub ids: Vec<String>,
    pub packs: Vec<FeaturePack>,
    pub labels: Vec<usize>,
}

impl SyntheticSplit {
    /// The same samples with image features removed.
    pub fn text_only(&self) -> Result<Self, EmbeddingError> {
        let packs = self
            .packs
            .iter()
            .map(|p| {
                FeaturePack::text_only(p.text_pooled.clone(), p.text_tokens.clone(), p.image_dim())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            ids: self.ids.clone(),
            packs,
            labels: self.labels.clone(),
        })
    }
}

struct Gen<'a> {
    cfg: &'a SeparabilityConfig,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn gauss(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Tokens whose first coordinate is `±signal` plus noise in every
    /// coordinate.
    fn tokens(&mut self, bit: bool, count: usize, dim: usize) -> Vec<Vec<f32>> {
        let sign = if bit { 1.0 } else { -1.0 };
        (0..count)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        let base = if j == 0 { sign * self.cfg.signal } else { 0.0 };
                        (base + self.cfg.noise * self.gauss()) as f32
                    })
                    .collect()
            })
            .collect()
    }

    fn noise_tokens(&mut self, count: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..count)
            .map(|_| (0..dim).map(|_| self.gauss() as f32).collect())
            .collect()
    }

    fn image(&mut self, b: bool) -> Vec<Vec<f32>> {
        let (n, d) = (self.cfg.image_tokens, self.cfg.image_dim);
        if self.cfg.image_noise_only {
            self.noise_tokens(n, d)
        } else {
            self.tokens(b, n, d)
        }
    }
}

fn pack(text: Vec<Vec<f32>>, image: Vec<Vec<f32>>) -> Result<FeaturePack, EmbeddingError> {
    let to_vecs = |v: Vec<Vec<f32>>| -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        v.into_iter()
            .map(|x| EmbeddingVector::new(x, "synthetic", false))
            .collect()
    };
    let mean = |v: &[Vec<f32>]| -> Vec<f32> {
        let n = v.len() as f64;
        (0..v[0].len())
            .map(|j| (v.iter().map(|t| t[j] as f64).sum::<f64>() / n) as f32)
            .collect()
    };
    let text_pooled = EmbeddingVector::new(mean(&text), "synthetic", false)?;
    let image_pooled = EmbeddingVector::new(mean(&image), "synthetic", false)?;
    FeaturePack::new(text_pooled, to_vecs(text)?, image_pooled, to_vecs(image)?)
}

/// Train split with uniformly drawn classes and the paired validation split.
pub fn separability_dataset(
    cfg: &SeparabilityConfig,
) -> Result<(SyntheticSplit, SyntheticSplit), EmbeddingError> {
    let mut g = Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut train = SyntheticSplit {
        ids: vec![],
        packs: vec![],
        labels: vec![],
    };
    for i in 0..cfg.train_samples {
        let y = g.rng.random_range(0..4usize);
        let (a, b) = (y / 2 == 1, y % 2 == 1);
        let text = g.tokens(a, cfg.text_tokens, cfg.text_dim);
        let image = g.image(b);
        train.ids.push(format!("train-{i:05}"));
        train.packs.push(pack(text, image)?);
        train.labels.push(y);
    }
    let mut val = SyntheticSplit {
        ids: vec![],
        packs: vec![],
        labels: vec![],
    };
    for i in 0..cfg.val_pairs {
        let a = g.rng.random_bool(0.5);
        let text = g.tokens(a, cfg.text_tokens, cfg.text_dim);
        for b in [false, true] {
            let image = g.image(b);
            val.ids.push(format!("val-{i:05}-{}", b as u8));
            val.packs.push(pack(text.clone(), image)?);
            val.labels.push(2 * a as usize + b as usize);
        }
    }
    Ok((train, val))
}

/// Validation accuracy of a fused head and a text-only head trained on the
/// same split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityOutcome {
    pub fused_accuracy: f64,
    pub text_only_accuracy: f64,
}

fn prepare(split: &SyntheticSplit) -> Result<Vec<PreparedPack<f32>>, FusionError> {
    split.packs.iter().map(PreparedPack::from_pack).collect()
}

fn train_and_score(
    train: &SyntheticSplit,
    val: &SyntheticSplit,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let names: Vec<String> = (0..fusion.num_classes).map(|c| format!("c{c}")).collect();
    let tp = prepare(train)?;
    let vp = prepare(val)?;
    let head = FusionHead::<f32>::build(
        fusion.clone(),
        train.packs[0].text_dim(),
        train.packs[0].image_dim(),
        cfg.seed,
    )?;
    let train_set = Dataset::new(&train.ids, &tp, &train.labels)?;
    let mut validator = SplitValidator {
        data: Dataset::new(&val.ids, &vp, &val.labels)?,
        class_names: names.clone(),
    };
    let (head, _) = train_loop(head, train_set, &mut validator, cfg, None)?;
    let out = evaluate_split(&head, &Dataset::new(&val.ids, &vp, &val.labels)?, &names)?;
    Ok(out.report.accuracy)
}

/// Generates the dataset, then trains and scores both heads. Model selection
/// uses the validation split, as in regular runs.
pub fn run_separability(
    data: &SeparabilityConfig,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
) -> Result<SeparabilityOutcome, TrainError> {
    let (train, val) = separability_dataset(data).map_err(|e| TrainError::Config(e.to_string()))?;
    let to_text = |s: &SyntheticSplit| s.text_only().map_err(|e| TrainError::Config(e.to_string()));
    Ok(SeparabilityOutcome {
        fused_accuracy: train_and_score(&train, &val, fusion, cfg)?,
        text_only_accuracy: train_and_score(&to_text(&train)?, &to_text(&val)?, fusion, cfg)?,
    })
}

/// Short review-like texts with four labels, for end-to-end pipeline runs.
pub fn fixture_corpus(n: usize, seed: u64) -> Vec<TextSample> {
    const SUBJECTS: [&str; 4] = [
        "coffee machine",
        "vacuum cleaner",
        "desk lamp",
        "running shoes",
    ];
    const MOODS: [&str; 2] = ["wonderful and reliable", "disappointing and flimsy"];
    const SETTINGS: [&str; 2] = ["in a bright kitchen", "on a dark wooden floor"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y = i % 4;
            let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
            TextSample {
                id: format!("r{i:04}"),
                text: format!(
                    "This {subject} is {} and it looks great {}.",
                    MOODS[y / 2],
                    SETTINGS[y % 2]
                ),
                label: y,
                split: None,
            }
        })
        .collect()
}

/// Label names matching [`fixture_corpus`].
pub const FIXTURE_LABELS: [&str; 4] = [
    "positive-bright",
    "positive-dark",
    "negative-bright",
    "negative-dark",
];

//! Experiment pipeline for augmenting text classification with generated
//! images: corpus handling, prompt construction, image generation with a
//! content-addressed cache, embedding providers, differentiable fusion
//! heads, AdamW training, evaluation and a resumable orchestrator.

pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod fusion;
pub mod generation;
pub mod orchestrator;
pub mod prompting;
pub mod synthetic;
pub mod tensorcore;
pub mod training;
pub mod util;

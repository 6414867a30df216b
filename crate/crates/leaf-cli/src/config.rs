//! Experiment configuration: one JSON file drives every pipeline command.
//!
//! The file nests the corpus, model, detection, and distillation settings
//! plus an output directory and a seed list. Per-run randomness never comes
//! from the nested sections directly: each run seed fans out through named
//! sub-streams (corpus, init-teacher, init-student, batching/*, baselines)
//! so that pipeline variants sharing a seed are paired sample-for-sample.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use leaf_core::corpus::CorpusConfig;
use leaf_core::detect::{DetectionConfig, MaskStrategy, SplitMode};
use leaf_core::distill::DistillConfig;
use leaf_core::model::{Capacity, ModelConfig};
use serde::{Deserialize, Serialize};

// ─── sections ───

/// Corpus settings minus the seed; run seeds derive the generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub base: usize,
    pub n_vars: usize,
    pub n_teacher_train: usize,
    pub n_student_train: usize,
    pub n_eval_pairs: usize,
    pub confounder_rate: f64,
    pub rho: f64,
    pub response_noise_rate: f64,
}

impl CorpusSection {
    pub fn to_core(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            base: self.base,
            n_vars: self.n_vars,
            n_teacher_train: self.n_teacher_train,
            n_student_train: self.n_student_train,
            n_eval_pairs: self.n_eval_pairs,
            confounder_rate: self.confounder_rate,
            rho: self.rho,
            response_noise_rate: self.response_noise_rate,
            seed,
        }
    }
}

/// One model's shape plus its next-token training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl ModelSection {
    pub fn to_core(&self, vocab_size: usize, max_seq_len: usize, capacity: Capacity) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            max_seq_len,
            capacity,
        }
    }
}

/// Distillation settings minus the seed; run seeds derive the batch stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub split: SplitMode,
    pub strategy: MaskStrategy,
}

impl DistillSection {
    pub fn to_core(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            split: self.split,
            strategy: self.strategy,
            seed,
        }
    }
}

/// Value grids for `leaf sweep`; each axis reruns the pipeline per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitMode>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<MaskStrategy>,
}

fn default_taus() -> Vec<f64> {
    vec![0.05, 0.10, 0.15]
}

fn default_lambdas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_splits() -> Vec<SplitMode> {
    vec![SplitMode::NoSplit, SplitMode::TwoSegment, SplitMode::ThreeSegment]
}

fn default_strategies() -> Vec<MaskStrategy> {
    vec![MaskStrategy::Gradient, MaskStrategy::Random, MaskStrategy::Ppl, MaskStrategy::None]
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            taus: default_taus(),
            lambdas: default_lambdas(),
            splits: default_splits(),
            strategies: default_strategies(),
        }
    }
}

// ─── the experiment ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub detection: DetectionConfig,
    pub distill: DistillSection,
    /// Context window for both models; must cover the longest sample.
    pub max_seq_len: usize,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let core_corpus = self.corpus.to_core(0);
        core_corpus.validate()?;
        self.detection.validate()?;
        self.distill.to_core(0).validate()?;
        if self.seeds.is_empty() {
            bail!("seed list must be nonempty");
        }
        let longest = core_corpus.max_instruction_len() + core_corpus.max_response_len();
        if self.max_seq_len < longest {
            bail!("max_seq_len {} below longest possible sample {longest}", self.max_seq_len);
        }
        let vocab = core_corpus.vocab()?.vocab_size();
        self.teacher.to_core(vocab, self.max_seq_len, Capacity::Teacher).validate()?;
        self.student.to_core(vocab, self.max_seq_len, Capacity::Student).validate()?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        // Validated at load; the unwrap cannot fire afterwards.
        self.corpus.to_core(0).vocab().expect("validated config").vocab_size()
    }

    /// Seeds a command operates on: the `--seed` override or the full list.
    pub fn run_seeds(&self, only: Option<u64>) -> Vec<u64> {
        match only {
            Some(s) => vec![s],
            None => self.seeds.clone(),
        }
    }
}

// ─── seed fan-out ───

/// One sub-seed per pipeline stage, derived from the run seed by name.
pub fn derive_seed(run_seed: u64, name: &str) -> u64 {
    leaf_core::rng::derive_seed(run_seed, name)
}

pub const STREAM_CORPUS: &str = "corpus";
pub const STREAM_INIT_TEACHER: &str = "init-teacher";
pub const STREAM_INIT_STUDENT: &str = "init-student";
pub const STREAM_BATCH_TEACHER: &str = "batching/teacher";
pub const STREAM_BATCH_STUDENT: &str = "batching/student";
pub const STREAM_BATCH_DISTILL: &str = "batching/distill";
pub const STREAM_BASELINES: &str = "baselines";

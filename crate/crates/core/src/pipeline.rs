//! End-to-end runs shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::interpret::CounterfactualKind;
use crate::metrics::{self, EvalOptions, EvalReport};
use crate::model::ModelConfig;
use crate::seed;
use crate::signal_io::{split_by_placement, synthesize_dataset, SegmentSet};
use crate::tokenizer::{TokenDataset, Vocabulary};
use crate::training::{run_training, TrainConfig, TrainResult};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Signal(#[from] crate::signal_io::SignalError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Training(#[from] crate::training::TrainingError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Interpret(#[from] crate::interpret::InterpretError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} step {step}: {reason}")]
    Diverged { epoch: usize, step: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Synthetic train-and-evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticExperiment {
    pub n_per_class: usize,
    pub segment_length: usize,
    pub levels: usize,
    pub split: [f64; 3],
    pub seed: u64,
    /// `None`: the default shape sized to the vocabulary.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

impl Default for SyntheticExperiment {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            segment_length: 200,
            levels: 50,
            split: [0.8, 0.1, 0.1],
            seed: 7,
            model: None,
            train: TrainConfig::default(),
        }
    }
}

/// Train/validation/test token datasets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TokenDataset,
    pub val: TokenDataset,
    pub test: TokenDataset,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub training: TrainResult,
    pub test_report: EvalReport,
    /// Interpolation errors of always predicting the most frequent training level.
    pub baseline: metrics::InterpolationErrors,
    pub baseline_level: u32,
}

impl SyntheticExperiment {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = Vocabulary::build(self.levels)?;
        let mut m = self
            .model
            .clone()
            .unwrap_or_else(|| ModelConfig::desk_scale(vocab.size()));
        m.vocab_size = vocab.size();
        m.seed = seed::derive(self.seed, "model-init");
        // room for the longest input this run can produce
        let mut needed = self.segment_length + 4;
        if self.train.counterfactual_kind == CounterfactualKind::Addition {
            needed += self.train.counterfactual_spec(self.segment_length).segment_length;
        }
        m.max_seq_len = m.max_seq_len.max(needed);
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mask_rate: self.train.mask_rate,
            mask_seed: seed::derive(self.seed, "eval-mask"),
            batch_size: self.train.batch_size_eval,
        }
    }

    pub fn segments(&self) -> Result<SegmentSet> {
        Ok(synthesize_dataset(self.n_per_class, self.segment_length, seed::derive(self.seed, "data"))?)
    }

    pub fn splits(&self) -> Result<Splits> {
        tokenized_splits(&self.segments()?, self.levels, self.split, seed::derive(self.seed, "split"))
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        run_experiment(&self.splits()?, &self.model_config()?, &self.train_config(), &self.eval_options())
    }
}

/// Placement-disjoint split followed by tokenization.
pub fn tokenized_splits(set: &SegmentSet, levels: usize, ratios: [f64; 3], split_seed: u64) -> Result<Splits> {
    let (train, val, test) = split_by_placement(set, ratios, split_seed)?;
    Ok(Splits {
        train: TokenDataset::from_segments(&train, levels)?,
        val: TokenDataset::from_segments(&val, levels)?,
        test: TokenDataset::from_segments(&test, levels)?,
    })
}

/// Trains on the training split and scores the test split.
pub fn run_experiment(
    splits: &Splits,
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalOptions,
) -> Result<ExperimentOutcome> {
    if splits.test.is_empty() {
        return Err(PipelineError::Config("test split is empty".into()));
    }
    let training = run_training(&splits.train, model, train)?;
    if let Some(d) = &training.diverged {
        return Err(PipelineError::Diverged {
            epoch: d.epoch,
            step: d.step,
            reason: d.reason.clone(),
        });
    }
    let test_report = metrics::evaluate(&training.checkpoint.state, &splits.test, eval)?;
    let baseline_level = metrics::most_frequent_level(&splits.train)?;
    let baseline = metrics::constant_level_baseline(&splits.test, baseline_level, eval)?;
    Ok(ExperimentOutcome {
        training,
        test_report,
        baseline,
        baseline_level,
    })
}

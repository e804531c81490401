use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CliError, CliResult};
use crate::interpret::{CounterfactualSpec, StudyOptions};
use crate::metrics::EvalOptions;
use crate::model::ModelConfig;
use crate::pipeline::SyntheticExperiment;
use crate::seed;
use crate::training::TrainConfig;

/// Everything a run can be parameterized with. Loaded from one JSON
/// document; command-line flags override the file; unset fields take their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; named sub-seeds for data, split, model-init, train and
    /// eval-mask derive from it.
    pub seed: u64,
    /// Quantization levels.
    pub levels: usize,
    pub segment_length: usize,
    /// Synthetic segments in total (half per class).
    pub n_segments: usize,
    pub split: [f64; 3],
    /// `None`: the default shape sized to the vocabulary.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub counterfactual: CounterfactualSpec,
    pub study: StudyOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            levels: crate::tokenizer::DEFAULT_LEVELS,
            segment_length: 1000,
            n_segments: 2000,
            split: [0.8, 0.1, 0.1],
            model: None,
            train: TrainConfig::default(),
            counterfactual: CounterfactualSpec::new(crate::interpret::CounterfactualKind::None),
            study: StudyOptions::default(),
        }
    }
}

/// What every artifact directory records about the run that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a bare config or the `config` member of a snapshot.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let body = match value.get("config") {
            Some(inner) if value.get("tool").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(body).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn snapshot(&self, argv: &[String]) -> Snapshot {
        Snapshot {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: argv.to_vec(),
            config: self.clone(),
        }
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        seed::derive(self.seed, name)
    }

    pub fn experiment(&self) -> CliResult<SyntheticExperiment> {
        if self.n_segments < 2 {
            return Err(CliError::usage("n_segments must be at least 2"));
        }
        Ok(SyntheticExperiment {
            n_per_class: self.n_segments / 2,
            segment_length: self.segment_length,
            levels: self.levels,
            split: self.split,
            seed: self.seed,
            model: self.model.clone(),
            train: self.train.clone(),
        })
    }

    /// Evaluation masks use the training mask rate and the `eval-mask` sub-seed.
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mask_rate: self.train.mask_rate,
            mask_seed: self.sub_seed("eval-mask"),
            batch_size: self.train.batch_size_eval,
        }
    }

    pub fn study_options(&self) -> StudyOptions {
        StudyOptions {
            eval: self.eval_options(),
            ..self.study.clone()
        }
    }
}

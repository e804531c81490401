//! Attention summaries, integrated gradients, counterfactual generators and
//! the plain-versus-counterfactual comparison study.

mod attribution;
mod counterfactual;
mod overlay;
mod study;

pub use attribution::{
    attention_summary, integrated_gradients, integrated_gradients_with, AttributionReport, IgTarget,
    DEFAULT_IG_STEPS,
};
pub use counterfactual::{
    label_flip, substitute_sequence, token_addition, token_substitution, CounterfactualKind, CounterfactualSpec,
    DEFAULT_ADDITION_LENGTH, DEFAULT_SMOOTHING_WINDOW,
};
pub use overlay::{overlay_csv, overlay_rows, parse_overlay_csv, render_overlay_svg, OverlayRow};
pub use study::{
    attribute_sample, counterfactual_study, position_amplitudes, transform_dataset, MaskRegime, SampleAttribution,
    StudyOptions, StudyReport, StudyRow,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient at integration step {step}")]
    NonFiniteGradient { step: usize },
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

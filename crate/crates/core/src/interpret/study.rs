use serde::{Deserialize, Serialize};

use super::{attention_summary, integrated_gradients, AttributionReport, CounterfactualSpec, IgTarget, InterpretError, Result};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::{ModelConfig, ModelState};
use crate::tokenizer::{apply_mask, TokenDataset, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyOptions {
    pub eval: EvalOptions,
    /// Leading samples of the dataset that get attribution sets.
    pub attribution_samples: usize,
    pub ig_steps: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            eval: EvalOptions::default(),
            attribution_samples: 4,
            ig_steps: super::DEFAULT_IG_STEPS,
        }
    }
}

/// Masking regime used when attributing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    /// Only the label slot is hidden.
    LabelMasked,
    /// Label slot plus the standard share of signal tokens.
    LabelAndSignalMasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub model: String,
    pub unmodified: EvalReport,
    pub modified: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub index: usize,
    pub model: String,
    pub regime: MaskRegime,
    /// Token ids the attribution was computed on.
    pub ids: Vec<u32>,
    pub attribution: AttributionReport,
    pub attention: Vec<f64>,
    /// Detokenized amplitude per position; `None` off the signal runs.
    pub amplitudes: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub spec: CounterfactualSpec,
    pub grid: Vec<StudyRow>,
    pub samples: Vec<SampleAttribution>,
}

/// Amplitude at every position: signal and augmentation tokens map to their
/// bin midpoints; every other position has none.
pub fn position_amplitudes(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<Option<f64>> {
    let v = vocab.levels() as f64;
    (0..seq.len())
        .map(|p| {
            let id = seq.original_id(p);
            vocab
                .level_of(id)
                .or_else(|| vocab.aug_level_of(id))
                .map(|q| seq.s_min + (q as f64 + 0.5) / v * (seq.s_max - seq.s_min))
        })
        .collect()
}

/// The dataset with `spec` applied to every sequence.
pub fn transform_dataset(data: &TokenDataset, spec: &CounterfactualSpec) -> Result<TokenDataset> {
    let vocab = data.vocabulary()?;
    let sequences = data
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| spec.apply(s, &vocab, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenDataset {
        sequences,
        ..data.clone()
    })
}

fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

/// Attribution and attention for one sequence under one masking regime.
pub fn attribute_sample(
    state: &ModelState,
    seq: &TokenSequence,
    regime: MaskRegime,
    mask_rate: f64,
    mask_seed: u64,
    steps: usize,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, AttributionReport, Vec<f64>)> {
    let rate = match regime {
        MaskRegime::LabelMasked => 0.0,
        MaskRegime::LabelAndSignalMasked => mask_rate,
    };
    let masked = apply_mask(seq, rate, mask_seed)?;
    let report = integrated_gradients(state, &masked, IgTarget::AfibLogit, steps, vocab)?;
    let trace = state
        .forward(&masked.ids, true)?
        .trace
        .expect("trace requested");
    Ok((masked, report, attention_summary(&trace)))
}

/// Evaluates a plainly trained and a counterfactually trained model on
/// unmodified and transformed inputs (a 2 x 2 grid of reports), and
/// attributes the leading transformed samples under both masking regimes.
pub fn counterfactual_study(
    plain: &ModelState,
    with_cf: &ModelState,
    data: &TokenDataset,
    spec: &CounterfactualSpec,
    options: &StudyOptions,
) -> Result<StudyReport> {
    if !same_shape(&plain.config, &with_cf.config) {
        return Err(InterpretError::Mismatch("the two models differ in configuration".into()));
    }
    let vocab = data.vocabulary()?;
    let modified = transform_dataset(data, spec)?;
    let metric = |e: crate::metrics::MetricsError| InterpretError::Mismatch(e.to_string());
    let mut grid = Vec::new();
    let models = [("plain", plain), ("counterfactual", with_cf)];
    for (name, state) in models {
        grid.push(StudyRow {
            model: name.into(),
            unmodified: evaluate(state, data, &options.eval).map_err(metric)?,
            modified: evaluate(state, &modified, &options.eval).map_err(metric)?,
        });
    }
    let mut samples = Vec::new();
    for index in 0..options.attribution_samples.min(modified.len()) {
        let seq = &modified.sequences[index];
        let mask_seed = crate::seed::nth(options.eval.mask_seed, index as u64);
        for (name, state) in models {
            for regime in [MaskRegime::LabelMasked, MaskRegime::LabelAndSignalMasked] {
                let (masked, attribution, attention) =
                    attribute_sample(state, seq, regime, options.eval.mask_rate, mask_seed, options.ig_steps, &vocab)?;
                samples.push(SampleAttribution {
                    index,
                    model: name.into(),
                    regime,
                    ids: masked.ids.clone(),
                    attribution,
                    attention,
                    amplitudes: position_amplitudes(&masked, &vocab),
                });
            }
        }
    }
    Ok(StudyReport {
        spec: spec.clone(),
        grid,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::CounterfactualKind;

    fn setup() -> (ModelState, ModelState, TokenDataset) {
        let set = crate::signal_io::synthesize_dataset(4, 24, 2).unwrap();
        let data = TokenDataset::from_segments(&set, 8).unwrap();
        let mut config = ModelConfig {
            vocab_size: 22,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 40,
            window_size: 4,
            global_positions: vec![0, -2],
            random_blocks_per_row: 0,
            tie_output: true,
            seed: 1,
        };
        let a = ModelState::init(config.clone()).unwrap();
        config.seed = 2;
        (a, ModelState::init(config).unwrap(), data)
    }

    fn options() -> StudyOptions {
        StudyOptions {
            attribution_samples: 2,
            ig_steps: 8,
            ..Default::default()
        }
    }

    #[test]
    fn identity_spec_gives_identical_rows() {
        let (a, b, data) = setup();
        let r = counterfactual_study(&a, &b, &data, &CounterfactualSpec::new(CounterfactualKind::None), &options()).unwrap();
        assert_eq!(r.grid.len(), 2);
        for row in &r.grid {
            assert_eq!(row.unmodified, row.modified);
        }
        assert_eq!(r.grid[0].unmodified, evaluate(&a, &data, &EvalOptions::default()).unwrap());
        assert_eq!(r.samples.len(), 2 * 2 * 2);
    }

    #[test]
    fn modified_reports_recompose_from_transformed_data() {
        let (a, b, data) = setup();
        let mut spec = CounterfactualSpec::new(CounterfactualKind::Addition);
        spec.segment_length = 6;
        let r = counterfactual_study(&a, &b, &data, &spec, &options()).unwrap();
        let transformed = transform_dataset(&data, &spec).unwrap();
        assert_eq!(r.grid[1].modified, evaluate(&b, &transformed, &EvalOptions::default()).unwrap());
        let s = &r.samples[0];
        assert_eq!(s.attribution.per_token_scores.len(), 24 + 6 + 4);
        assert_eq!(s.amplitudes.iter().filter(|a| a.is_some()).count(), 30);
        assert!((s.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let flipped = counterfactual_study(&a, &b, &data, &CounterfactualSpec::new(CounterfactualKind::LabelFlip), &options()).unwrap();
        let u = &flipped.grid[0];
        assert_eq!(u.modified.accuracy.unwrap(), 1.0 - u.unmodified.accuracy.unwrap());
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let (a, _, data) = setup();
        let mut c = a.config.clone();
        c.d_model = 16;
        c.d_ffn = 32;
        let other = ModelState::init(c).unwrap();
        assert!(counterfactual_study(&a, &other, &data, &CounterfactualSpec::new(CounterfactualKind::None), &options()).is_err());
    }
}

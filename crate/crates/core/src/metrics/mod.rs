//! Classification and interpolation metrics, and whole-dataset evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelState};
use crate::tokenizer::{apply_mask, TokenDataset, TokenId, TokenSequence, TokenizerError, Vocabulary, STANDARD_MASK_RATE};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vocabulary mismatch: model has {model} ids, dataset needs {data}")]
    VocabularyMismatch { model: usize, data: usize },
    #[error("position {position}: predicted non-signal token {id}")]
    NonSignalPrediction { position: usize, id: TokenId },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Binary confusion counts with AFib as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, predicted: u8, label: u8) {
        match (predicted, label) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut cm = Self::default();
        for (p, l) in pairs {
            cm.record(p, l);
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

/// The five classification metrics; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    ClassificationMetrics {
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        npv: ratio(cm.tn, cm.tn + cm.fn_),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    }
}

/// What a non-signal prediction at a masked signal position is scored as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonSignalFallback {
    /// The level farthest from the true one (worst case error).
    #[default]
    FarthestLevel,
    /// Reject with an error.
    Reject,
}

/// Summed squared and absolute errors over the masked signal positions of
/// one sequence, in the z-score amplitude domain.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InterpolationErrors {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: usize,
    /// Predictions that were not signal tokens.
    pub incidents: usize,
}

impl InterpolationErrors {
    pub fn mse(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_sq / self.count as f64)
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_abs / self.count as f64)
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.count += other.count;
        self.incidents += other.incidents;
    }
}

/// Errors of `predicted` (one id per sequence position) against the masked
/// originals of `seq`. Predictions at other positions are ignored.
pub fn interpolation_metrics(
    predicted: &[TokenId],
    seq: &TokenSequence,
    vocab: &Vocabulary,
    fallback: NonSignalFallback,
) -> Result<InterpolationErrors> {
    let plan = seq
        .mask
        .as_ref()
        .ok_or_else(|| MetricsError::InvalidArgument("sequence carries no mask plan".into()))?;
    if predicted.len() != seq.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "{} predictions for a {}-token sequence",
            predicted.len(),
            seq.len()
        )));
    }
    let v = vocab.levels();
    let amp = |q: u32| seq.s_min + (q as f64 + 0.5) / v as f64 * (seq.s_max - seq.s_min);
    let mut out = InterpolationErrors::default();
    for &p in &plan.masked_signal_positions {
        let truth = vocab
            .level_of(seq.original_id(p))
            .ok_or(TokenizerError::NotSignal {
                position: p,
                id: seq.original_id(p),
            })?;
        let guess = match vocab.level_of(predicted[p]) {
            Some(q) => q,
            None => match fallback {
                NonSignalFallback::Reject => {
                    return Err(MetricsError::NonSignalPrediction {
                        position: p,
                        id: predicted[p],
                    })
                }
                NonSignalFallback::FarthestLevel => {
                    out.incidents += 1;
                    if truth as usize >= v / 2 {
                        0
                    } else {
                        v as u32 - 1
                    }
                }
            },
        };
        let e = amp(guess) - amp(truth);
        out.sum_sq += e * e;
        out.sum_abs += e.abs();
        out.count += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sequences: usize,
    pub n_masked_positions: usize,
    pub confusion: ConfusionMatrix,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    /// Masked positions whose unrestricted argmax was not a signal token.
    pub decode_incidents: usize,
}

impl EvalReport {
    pub fn from_parts(confusion: ConfusionMatrix, interp: &InterpolationErrors, decode_incidents: usize) -> Self {
        let c = classification_metrics(&confusion);
        Self {
            n_sequences: confusion.total() as usize,
            n_masked_positions: interp.count,
            confusion,
            sensitivity: c.sensitivity,
            specificity: c.specificity,
            ppv: c.ppv,
            npv: c.npv,
            accuracy: c.accuracy,
            mse: interp.mse(),
            mae: interp.mae(),
            decode_incidents,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-sequence evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub index: usize,
    pub label: u8,
    pub predicted: u8,
    /// Two-way probability of the AFib class at the label slot.
    pub p_afib: f64,
    pub errors: InterpolationErrors,
    pub decode_incidents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub mask_rate: f64,
    pub mask_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask_rate: STANDARD_MASK_RATE,
            mask_seed: 0,
            batch_size: 1,
        }
    }
}

fn argmax(values: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Scores one already-masked sequence with a single forward pass.
pub fn evaluate_sequence(state: &ModelState, seq: &TokenSequence, vocab: &Vocabulary, index: usize) -> Result<SequenceResult> {
    let logits = state.forward(&seq.ids, false)?.logits;
    let pos = seq.afib_position();
    let (z0, z1) = (
        logits.get(pos, vocab.afib_id(0) as usize),
        logits.get(pos, vocab.afib_id(1) as usize),
    );
    let predicted = u8::from(z1 > z0);
    let p_afib = 1.0 / (1.0 + (z0 - z1).exp());
    let signal = vocab.signal_ids();
    let mut pred_ids = seq.ids.clone();
    let mut incidents = 0;
    let plan = seq
        .mask
        .as_ref()
        .ok_or_else(|| MetricsError::InvalidArgument("sequence carries no mask plan".into()))?;
    for &p in &plan.masked_signal_positions {
        let row = logits.row(p);
        let free = argmax(row.iter().copied().enumerate());
        if !signal.contains(&free) {
            incidents += 1;
        }
        pred_ids[p] = argmax(signal.clone().map(|t| (t, row[t]))) as TokenId;
    }
    let errors = interpolation_metrics(&pred_ids, seq, vocab, NonSignalFallback::Reject)?;
    let label = vocab.afib_class_of(seq.original_id(pos)).unwrap_or(seq.label);
    Ok(SequenceResult {
        index,
        label,
        predicted,
        p_afib,
        errors,
        decode_incidents: incidents,
    })
}

/// Masks every sequence in the standard regime (seeded per index), scores
/// it, and aggregates. Sequences within a batch run in parallel; the
/// reduction follows dataset order, so any batch size gives the same report.
pub fn evaluate_detailed(
    state: &ModelState,
    data: &TokenDataset,
    options: &EvalOptions,
) -> Result<(EvalReport, Vec<SequenceResult>)> {
    let vocab = data.vocabulary()?;
    if state.config.vocab_size != vocab.size() {
        return Err(MetricsError::VocabularyMismatch {
            model: state.config.vocab_size,
            data: vocab.size(),
        });
    }
    if options.batch_size == 0 {
        return Err(MetricsError::InvalidArgument("batch size must be positive".into()));
    }
    let mut results = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(options.batch_size) {
        let part: Vec<Result<SequenceResult>> = chunk
            .par_iter()
            .map(|&i| {
                let seed = crate::seed::nth(options.mask_seed, i as u64);
                let masked = apply_mask(&data.sequences[i], options.mask_rate, seed)?;
                evaluate_sequence(state, &masked, &vocab, i)
            })
            .collect();
        for r in part {
            results.push(r?);
        }
    }
    Ok((aggregate(&results), results))
}

pub fn evaluate(state: &ModelState, data: &TokenDataset, options: &EvalOptions) -> Result<EvalReport> {
    evaluate_detailed(state, data, options).map(|(r, _)| r)
}

/// Combines per-sequence outcomes in the given order.
pub fn aggregate(results: &[SequenceResult]) -> EvalReport {
    let cm = ConfusionMatrix::from_pairs(results.iter().map(|r| (r.predicted, r.label)));
    let mut interp = InterpolationErrors::default();
    let mut incidents = 0;
    for r in results {
        interp.merge(&r.errors);
        incidents += r.decode_incidents;
    }
    EvalReport::from_parts(cm, &interp, incidents)
}

/// Per-sequence results as CSV.
pub fn results_csv(results: &[SequenceResult]) -> String {
    let mut out = String::from("index,label,predicted,p_afib,masked,sum_sq,sum_abs,decode_incidents\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:e},{},{:e},{:e},{}\n",
            r.index, r.label, r.predicted, r.p_afib, r.errors.count, r.errors.sum_sq, r.errors.sum_abs, r.decode_incidents
        ));
    }
    out
}

/// Interpolation error of always predicting one fixed level.
pub fn constant_level_baseline(data: &TokenDataset, level: u32, options: &EvalOptions) -> Result<InterpolationErrors> {
    let vocab = data.vocabulary()?;
    let mut total = InterpolationErrors::default();
    for (i, seq) in data.sequences.iter().enumerate() {
        let masked = apply_mask(seq, options.mask_rate, crate::seed::nth(options.mask_seed, i as u64))?;
        let pred = vec![vocab.signal_id(level); masked.len()];
        total.merge(&interpolation_metrics(&pred, &masked, &vocab, NonSignalFallback::Reject)?);
    }
    Ok(total)
}

/// Most frequent signal level over a dataset (ties go to the lower level).
pub fn most_frequent_level(data: &TokenDataset) -> Result<u32> {
    let vocab = data.vocabulary()?;
    let mut counts = vec![0u64; vocab.levels()];
    for seq in &data.sequences {
        for q in seq.signal_levels(&vocab)? {
            counts[q as usize] += 1;
        }
    }
    Ok(argmax(counts.iter().map(|&c| c as f64).enumerate()) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::tokenize_segment;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn definitional_cases() {
        let cm = ConfusionMatrix { tp: 9, fn_: 1, ..Default::default() };
        let m = classification_metrics(&cm);
        assert_eq!(m.sensitivity, Some(0.9));
        assert_eq!(m.ppv, Some(1.0));
        assert_eq!(m.specificity, None);
        assert_eq!(m.npv, Some(0.0));
        let empty_pos = classification_metrics(&ConfusionMatrix { tn: 3, fn_: 2, ..Default::default() });
        assert_eq!(empty_pos.ppv, None);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"specificity\":null"));
    }

    #[test]
    fn brute_force_recount() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(u8, u8)> = (0..1000).map(|_| (rng.random_range(0..2), rng.random_range(0..2))).collect();
        let cm = ConfusionMatrix::from_pairs(pairs.iter().copied());
        let count = |f: &dyn Fn(u8, u8) -> bool| pairs.iter().filter(|(p, l)| f(*p, *l)).count() as f64;
        let tp = count(&|p, l| p == 1 && l == 1);
        let tn = count(&|p, l| p == 0 && l == 0);
        let fp = count(&|p, l| p == 1 && l == 0);
        let fn_ = count(&|p, l| p == 0 && l == 1);
        let m = classification_metrics(&cm);
        assert_eq!(m.sensitivity, Some(tp / (tp + fn_)));
        assert_eq!(m.specificity, Some(tn / (tn + fp)));
        assert_eq!(m.ppv, Some(tp / (tp + fp)));
        assert_eq!(m.npv, Some(tn / (tn + fn_)));
        assert_eq!(m.accuracy, Some((tp + tn) / 1000.0));
    }

    proptest! {
        #[test]
        fn accuracy_identity(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let cm = ConfusionMatrix { tp, fp, tn, fn_ };
            prop_assume!(cm.positives() > 0 && cm.negatives() > 0);
            let m = classification_metrics(&cm);
            let (p, n) = (cm.positives() as f64, cm.negatives() as f64);
            let lhs = m.accuracy.unwrap();
            let rhs = (m.sensitivity.unwrap() * p + m.specificity.unwrap() * n) / (p + n);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_order_invariant(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(ConfusionMatrix::from_pairs(pairs), ConfusionMatrix::from_pairs(rev));
        }
    }

    fn masked(vocab: &Vocabulary) -> TokenSequence {
        let seg: Vec<f64> = (0..40).map(|i| ((i * 13) % 17) as f64 / 4.0).collect();
        apply_mask(&tokenize_segment(&seg, 1, vocab), 0.5, 2).unwrap()
    }

    #[test]
    fn interpolation_closed_forms() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked(&vocab);
        let exact: Vec<TokenId> = (0..seq.len()).map(|p| seq.original_id(p)).collect();
        let e = interpolation_metrics(&exact, &seq, &vocab, NonSignalFallback::Reject).unwrap();
        assert_eq!((e.mse(), e.mae(), e.count), (Some(0.0), Some(0.0), 20));

        // one level off everywhere: |error| = (s_max - s_min) / V
        let delta = seq.s_max - seq.s_min;
        let off: Vec<TokenId> = (0..seq.len())
            .map(|p| {
                let id = seq.original_id(p);
                match vocab.level_of(id) {
                    Some(q) if q > 0 => vocab.signal_id(q - 1),
                    Some(q) => vocab.signal_id(q + 1),
                    None => id,
                }
            })
            .collect();
        let e = interpolation_metrics(&off, &seq, &vocab, NonSignalFallback::Reject).unwrap();
        assert!((e.mae().unwrap() - delta / 10.0).abs() < 1e-12);
        assert!((e.mse().unwrap() - (delta / 10.0).powi(2)).abs() < 1e-12);

        // unmasked positions are ignored
        let mut noisy = exact.clone();
        noisy[0] = 3;
        noisy[seq.len() - 1] = 3;
        assert_eq!(interpolation_metrics(&noisy, &seq, &vocab, NonSignalFallback::Reject).unwrap().count, 20);
    }

    #[test]
    fn non_signal_fallback() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked(&vocab);
        let mut pred: Vec<TokenId> = (0..seq.len()).map(|p| seq.original_id(p)).collect();
        let p = seq.mask.as_ref().unwrap().masked_signal_positions[0];
        pred[p] = 2;
        assert!(matches!(
            interpolation_metrics(&pred, &seq, &vocab, NonSignalFallback::Reject),
            Err(MetricsError::NonSignalPrediction { .. })
        ));
        let e = interpolation_metrics(&pred, &seq, &vocab, NonSignalFallback::FarthestLevel).unwrap();
        assert_eq!(e.incidents, 1);
        let q = vocab.level_of(seq.original_id(p)).unwrap() as f64;
        let far = if q >= 5.0 { 0.0 } else { 9.0 };
        assert!((e.sum_abs - (far - q).abs() * (seq.s_max - seq.s_min) / 10.0).abs() < 1e-12);
    }

    fn toy() -> (ModelState, TokenDataset) {
        let set = crate::signal_io::synthesize_dataset(6, 24, 1).unwrap();
        let data = TokenDataset::from_segments(&set, 8).unwrap();
        let config = ModelConfig {
            vocab_size: 22,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 32,
            window_size: 4,
            global_positions: vec![0, -2],
            random_blocks_per_row: 0,
            tie_output: true,
            seed: 2,
        };
        (ModelState::init(config).unwrap(), data)
    }

    #[test]
    fn batched_equals_single_and_recomposes() {
        let (state, data) = toy();
        let single = EvalOptions { batch_size: 1, mask_seed: 4, ..Default::default() };
        let batched = EvalOptions { batch_size: 5, ..single.clone() };
        let (a, details) = evaluate_detailed(&state, &data, &single).unwrap();
        let b = evaluate(&state, &data, &batched).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_sequences, 12);
        assert_eq!(a.n_masked_positions, 12 * 18);
        let cm = ConfusionMatrix::from_pairs(details.iter().map(|r| (r.predicted, r.label)));
        let m = classification_metrics(&cm);
        assert_eq!((a.sensitivity, a.specificity, a.ppv, a.npv, a.accuracy), (m.sensitivity, m.specificity, m.ppv, m.npv, m.accuracy));
        assert_eq!(results_csv(&details).lines().count(), 13);
    }

    #[test]
    fn vocabulary_mismatch() {
        let (state, _) = toy();
        let set = crate::signal_io::synthesize_dataset(2, 24, 1).unwrap();
        let other = TokenDataset::from_segments(&set, 9).unwrap();
        assert!(matches!(
            evaluate(&state, &other, &EvalOptions::default()),
            Err(MetricsError::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn most_frequent_level_baseline() {
        let (_, data) = toy();
        let q = most_frequent_level(&data).unwrap();
        let base = constant_level_baseline(&data, q, &EvalOptions::default()).unwrap();
        assert!(base.mse().unwrap() > 0.0);
        assert_eq!(base.count, 12 * 18);
    }
}

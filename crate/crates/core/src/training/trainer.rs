use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adamw_step, loss_and_grad, AdamState, AdamWConfig, LossBreakdown, Result, TrainingError};
use crate::interpret::{CounterfactualKind, CounterfactualSpec, DEFAULT_SMOOTHING_WINDOW};
use crate::model::{Checkpoint, ModelConfig, ModelError, ModelInput, ModelState, Weights};
use crate::seed;
use crate::tokenizer::{apply_mask, TokenDataset, TokenSequence, Vocabulary, STANDARD_MASK_RATE};

/// Learning-rate schedule. Only a constant rate is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub epochs: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub mask_rate: f64,
    pub counterfactual_kind: CounterfactualKind,
    pub counterfactual_fraction: f64,
    pub substitution_window: usize,
    /// Length of the token-addition run; `None` means a quarter of the segment.
    pub addition_length: Option<usize>,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size_train: 8,
            batch_size_eval: 1,
            epochs: 5,
            alpha1: 1.0,
            alpha2: 1.0,
            mask_rate: STANDARD_MASK_RATE,
            counterfactual_kind: CounterfactualKind::None,
            counterfactual_fraction: 0.25,
            substitution_window: DEFAULT_SMOOTHING_WINDOW,
            addition_length: None,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainingError::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("mask_rate", self.mask_rate),
            ("counterfactual_fraction", self.counterfactual_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.substitution_window % 2 == 0 {
            return bad(format!("substitution_window must be odd, got {}", self.substitution_window));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }

    pub fn learning_rate_at(&self, _step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
        }
    }

    /// Counterfactual transform used for the selected samples.
    pub fn counterfactual_spec(&self, segment_length: usize) -> CounterfactualSpec {
        CounterfactualSpec {
            kind: self.counterfactual_kind,
            window: self.substitution_window,
            segment_length: self
                .addition_length
                .unwrap_or(((segment_length as f64) * 0.25).round() as usize),
            seed: seed::derive(self.seed, "counterfactual-content"),
        }
    }
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_afib: f64,
    pub total: f64,
    /// Mean masked-position count: multiply `l_mlm` by it for the summed loss.
    pub mlm_sum_scale: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Final state, or the last state before divergence.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub diverged: Option<Divergence>,
}

/// One training input after counterfactual injection and masking.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub index: usize,
    pub seq: TokenSequence,
    pub modified: bool,
}

/// Dataset order for `epoch`, cut into training batches.
pub fn plan_batches(n: usize, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::nth(seed::derive(config.seed, "shuffle"), epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(config.batch_size_train).map(<[usize]>::to_vec).collect()
}

/// Which members of batch `batch_index` receive the counterfactual:
/// `round(fraction * len)` of them, drawn without replacement. The draw does
/// not depend on the counterfactual kind.
pub fn counterfactual_selection(len: usize, config: &TrainConfig, batch_index: u64) -> Vec<usize> {
    let count = ((config.counterfactual_fraction * len as f64).round() as usize).min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::nth(seed::derive(config.seed, "counterfactual"), batch_index));
    let mut chosen = rand::seq::index::sample(&mut rng, len, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Seed of the mask drawn for dataset item `index` in `epoch`.
pub fn mask_seed(config: &TrainConfig, epoch: usize, index: usize) -> u64 {
    seed::nth(seed::nth(seed::derive(config.seed, "mask"), epoch as u64), index as u64)
}

/// Builds the masked inputs of one batch. Substitution runs before masking,
/// addition after tokenization and before masking (the inserted run is
/// never masked), and label flipping at the label slot after masking.
pub fn prepare_batch(
    data: &TokenDataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    epoch: usize,
    batch_index: u64,
    indices: &[usize],
) -> Result<Vec<PreparedSample>> {
    let selected = match config.counterfactual_kind {
        CounterfactualKind::None => Vec::new(),
        _ => counterfactual_selection(indices.len(), config, batch_index),
    };
    let spec = config.counterfactual_spec(data.segment_length);
    indices
        .iter()
        .enumerate()
        .map(|(slot, &index)| {
            let base = data.sequences[index].unmasked();
            let modified = selected.binary_search(&slot).is_ok();
            let mseed = mask_seed(config, epoch, index);
            let seq = match (modified, spec.kind) {
                (false, _) | (true, CounterfactualKind::None) => apply_mask(&base, config.mask_rate, mseed)?,
                (true, CounterfactualKind::LabelFlip) => {
                    spec.apply(&apply_mask(&base, config.mask_rate, mseed)?, vocab, index as u64)?
                }
                (true, _) => apply_mask(&spec.apply(&base, vocab, index as u64)?, config.mask_rate, mseed)?,
            };
            Ok(PreparedSample { index, seq, modified })
        })
        .collect()
}

/// Every prepared batch of `epoch` in training order.
pub fn epoch_batches(
    data: &TokenDataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<PreparedSample>>> {
    let batches = plan_batches(data.len(), config, epoch);
    let first = (epoch * batches.len()) as u64;
    batches
        .iter()
        .enumerate()
        .map(|(b, idx)| prepare_batch(data, vocab, config, epoch, first + b as u64, idx))
        .collect()
}

/// Mean loss and summed parameter gradient of a batch. Per-sample work may
/// run in parallel; the reduction is sequential in batch order.
pub fn batch_gradient(
    state: &ModelState,
    batch: &[PreparedSample],
    vocab: &Vocabulary,
    alpha1: f64,
    alpha2: f64,
) -> Result<(Vec<LossBreakdown>, Weights)> {
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(LossBreakdown, Weights)>> = batch
        .par_iter()
        .map(|s| {
            let breakdown = std::cell::Cell::new(None);
            let failure = std::cell::RefCell::new(None);
            let objective = |logits: &crate::model::Matrix| match loss_and_grad(logits, &s.seq, vocab, alpha1, alpha2) {
                Ok((b, mut g)) => {
                    breakdown.set(Some(b));
                    g.scale(scale);
                    (b.total * scale, g)
                }
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    (f64::NAN, crate::model::Matrix::zeros(logits.rows, logits.cols))
                }
            };
            let out = state.gradients(ModelInput::Ids(&s.seq.ids), &objective);
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            let out = out?;
            Ok((breakdown.get().expect("objective evaluated"), out.params))
        })
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Option<Weights> = None;
    for r in per_sample {
        let (b, g) = r?;
        losses.push(b);
        match sum.as_mut() {
            None => sum = Some(g),
            Some(acc) => acc.add_scaled(&g, 1.0),
        }
    }
    Ok((losses, sum.expect("non-empty batch")))
}

/// Trains a freshly initialized model on `data`.
pub fn run_training(data: &TokenDataset, model: &ModelConfig, config: &TrainConfig) -> Result<TrainResult> {
    let state = ModelState::init(model.clone())?;
    train_from(state, data, config)
}

/// Trains `state` on `data` for `config.epochs` epochs. Divergence stops the
/// run and returns the last state whose step completed.
pub fn train_from(mut state: ModelState, data: &TokenDataset, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainingError::InvalidArgument("empty training set".into()));
    }
    let vocab = data.vocabulary()?;
    if state.config.vocab_size != vocab.size() {
        return Err(TrainingError::InvalidArgument(format!(
            "model vocabulary {} does not match dataset vocabulary {}",
            state.config.vocab_size,
            vocab.size()
        )));
    }
    let started = Instant::now();
    let mut opt = AdamState::for_weights(&state.weights);
    let mut history = Vec::new();
    let mut diverged = None;
    let mut step = 0u64;
    'epochs: for epoch in 0..config.epochs {
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for batch in epoch_batches(data, &vocab, config, epoch)? {
            let (losses, grads) = match batch_gradient(&state, &batch, &vocab, config.alpha1, config.alpha2) {
                Ok(v) => v,
                Err(TrainingError::Model(ModelError::NonFiniteLoss(v))) => {
                    diverged = Some(Divergence {
                        epoch,
                        step,
                        reason: format!("non-finite loss {v}"),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut adam = config.adamw();
            adam.lr = config.learning_rate_at(step);
            let mut next = state.weights.clone();
            match adamw_step(&mut next, &grads, &mut opt, &adam) {
                Ok(()) if next.is_finite() => state.weights = next,
                Ok(()) => {
                    diverged = Some(Divergence {
                        epoch,
                        step,
                        reason: "parameters became non-finite".into(),
                    });
                    break 'epochs;
                }
                Err(e @ TrainingError::NonFiniteGradient { .. }) => {
                    diverged = Some(Divergence {
                        epoch,
                        step,
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            for b in &losses {
                sums[0] += b.l_mlm;
                sums[1] += b.l_afib;
                sums[2] += b.total;
                sums[3] += b.n_masked as f64;
            }
            count += losses.len();
        }
        let n = count as f64;
        history.push(EpochRecord {
            epoch,
            l_mlm: sums[0] / n,
            l_afib: sums[1] / n,
            total: sums[2] / n,
            mlm_sum_scale: sums[3] / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let meta = serde_json::json!({
        "levels": data.levels,
        "segment_length": data.segment_length,
        "train": config,
        "steps": step,
    });
    Ok(TrainResult {
        checkpoint: Checkpoint { state, meta },
        history,
        steps: step,
        diverged,
    })
}

/// Training history as CSV: `epoch,l_mlm,l_afib,total,mlm_sum_scale,wall_seconds`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_mlm,l_afib,total,mlm_sum_scale,wall_seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{:.3}\n",
            r.epoch, r.l_mlm, r.l_afib, r.total, r.mlm_sum_scale, r.wall_seconds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::synthesize_dataset;
    use crate::tokenizer::MASK;

    fn toy(n_per_class: usize, m: usize, levels: usize) -> TokenDataset {
        TokenDataset::from_segments(&synthesize_dataset(n_per_class, m, 5).unwrap(), levels).unwrap()
    }

    fn small_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_seq_len: 64,
            window_size: 8,
            global_positions: vec![0, -2],
            random_blocks_per_row: 0,
            tie_output: true,
            seed: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { counterfactual_fraction: 1.5, ..Default::default() },
            TrainConfig { alpha1: -0.1, ..Default::default() },
            TrainConfig { batch_size_train: 0, ..Default::default() },
            TrainConfig { substitution_window: 4, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 2, "counterfactual_kind": "label_flip"}"#).unwrap();
        assert_eq!(parsed.epochs, 2);
        assert_eq!(parsed.counterfactual_kind, CounterfactualKind::LabelFlip);
        assert_eq!(parsed.learning_rate, 1e-4);
    }

    #[test]
    fn quarter_of_each_batch_is_modified() {
        let data = toy(12, 24, 8);
        let vocab = data.vocabulary().unwrap();
        let config = TrainConfig {
            counterfactual_kind: CounterfactualKind::Substitution,
            ..Default::default()
        };
        let batches = epoch_batches(&data, &vocab, &config, 0).unwrap();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(b.len(), 8);
            assert_eq!(b.iter().filter(|s| s.modified).count(), 2);
        }
        let mut seen: Vec<usize> = batches.iter().flatten().map(|s| s.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn label_flip_stream_differs_only_at_label_slot() {
        let data = toy(10, 24, 8);
        let vocab = data.vocabulary().unwrap();
        let plain = TrainConfig::default();
        let flip = TrainConfig {
            counterfactual_kind: CounterfactualKind::LabelFlip,
            ..Default::default()
        };
        for epoch in 0..2 {
            let a = epoch_batches(&data, &vocab, &plain, epoch).unwrap();
            let b = epoch_batches(&data, &vocab, &flip, epoch).unwrap();
            for (ba, bb) in a.iter().zip(&b) {
                for (sa, sb) in ba.iter().zip(bb) {
                    assert_eq!(sa.index, sb.index);
                    assert_eq!(sa.seq.ids, sb.seq.ids);
                    let p = sa.seq.afib_position();
                    assert_eq!(sa.seq.ids[p], MASK);
                    if sb.modified {
                        assert_ne!(sa.seq.original_id(p), sb.seq.original_id(p));
                        assert_ne!(sa.seq.label, sb.seq.label);
                    } else {
                        assert_eq!(sa.seq, sb.seq);
                    }
                }
            }
        }
    }

    #[test]
    fn addition_batches_are_longer_and_unmasked_in_the_run() {
        let data = toy(8, 40, 8);
        let vocab = data.vocabulary().unwrap();
        let config = TrainConfig {
            counterfactual_kind: CounterfactualKind::Addition,
            ..Default::default()
        };
        for s in epoch_batches(&data, &vocab, &config, 0).unwrap().iter().flatten() {
            if s.modified {
                assert_eq!(s.seq.len(), 44 + 10);
                assert!(s.seq.aug_positions().all(|p| s.seq.ids[p] != MASK));
            } else {
                assert_eq!(s.seq.len(), 44);
            }
            assert_eq!(s.seq.mask.as_ref().unwrap().masked_signal_positions.len(), 30);
        }
    }

    #[test]
    fn masks_change_between_epochs() {
        let data = toy(4, 24, 8);
        let vocab = data.vocabulary().unwrap();
        let config = TrainConfig::default();
        let masks = |e| -> Vec<Vec<usize>> {
            let mut all: Vec<PreparedSample> = epoch_batches(&data, &vocab, &config, e).unwrap().into_iter().flatten().collect();
            all.sort_by_key(|s| s.index);
            all.into_iter().map(|s| s.seq.mask.unwrap().masked_signal_positions).collect()
        };
        assert_ne!(masks(0), masks(1));
        assert_eq!(masks(1), masks(1));
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let data = toy(2, 24, 8);
        let vocab = data.vocabulary().unwrap();
        let state = ModelState::init(small_model(vocab.size())).unwrap();
        let config = TrainConfig::default();
        let batch = &epoch_batches(&data, &vocab, &config, 0).unwrap()[0];
        let (losses, g) = batch_gradient(&state, batch, &vocab, 1.0, 1.0).unwrap();
        assert_eq!(losses.len(), 4);
        let mut manual = Weights::zeros(&state.config);
        for s in batch {
            let (_, gs) = batch_gradient(&state, std::slice::from_ref(s), &vocab, 1.0, 1.0).unwrap();
            manual.add_scaled(&gs, 0.25);
        }
        for ((_, a), (_, b)) in g.tensors().iter().zip(manual.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy(100, 32, 10);
        let vocab = data.vocabulary().unwrap();
        let model = small_model(vocab.size());
        let config = TrainConfig {
            learning_rate: 3e-3,
            epochs: 5,
            seed: 3,
            ..Default::default()
        };
        let a = run_training(&data, &model, &config).unwrap();
        assert!(a.diverged.is_none());
        assert_eq!(a.history.len(), 5);
        assert_eq!(a.steps, 5 * 25);
        assert!(a.history[4].total < a.history[0].total, "{:?}", a.history);
        let b = run_training(&data, &model, &config).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.l_mlm, r.l_afib, r.total)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        let csv = history_csv(&a.history);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("epoch,l_mlm,l_afib,total,"));
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let data = toy(4, 24, 8);
        let vocab = data.vocabulary().unwrap();
        let mut state = ModelState::init(small_model(vocab.size())).unwrap();
        state.weights.out_b[5] = f64::INFINITY;
        let before = state.clone();
        let r = train_from(state, &data, &TrainConfig::default()).unwrap();
        let d = r.diverged.expect("diverged");
        assert_eq!((d.epoch, d.step), (0, 0));
        assert_eq!(r.checkpoint.state, before);
        assert!(r.history.is_empty());
    }
}

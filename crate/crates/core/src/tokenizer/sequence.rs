use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{quantize_levels, segment_range, Result, TokenId, TokenizerError, Vocabulary, CLS, MASK, SEP};

/// Fraction of signal tokens hidden in the standard regime.
pub const STANDARD_MASK_RATE: f64 = 0.75;

/// Which positions of a sequence were replaced by `[MASK]`, and what they held.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskPlan {
    /// Sorted sequence positions inside the signal run.
    pub masked_signal_positions: Vec<usize>,
    pub afib_masked: bool,
    pub originals: BTreeMap<usize, TokenId>,
}

/// `[CLS] signal_* x M (augsig_* x A) [SEP] afib_* [SEP]`
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub label: u8,
    /// Extremes of the source segment in the z-score domain.
    pub s_min: f64,
    pub s_max: f64,
    pub signal_len: usize,
    /// Length of the augmentation run; 0 unless token addition was applied.
    pub aug_len: usize,
    /// Source segment was constant and quantized to all zeros.
    pub degenerate: bool,
    pub mask: Option<MaskPlan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn signal_positions(&self) -> Range<usize> {
        1..1 + self.signal_len
    }

    pub fn aug_positions(&self) -> Range<usize> {
        1 + self.signal_len..1 + self.signal_len + self.aug_len
    }

    pub fn afib_position(&self) -> usize {
        self.signal_len + self.aug_len + 2
    }

    pub fn is_masked(&self) -> bool {
        self.mask.is_some()
    }

    /// Token at `position` before masking.
    pub fn original_id(&self, position: usize) -> TokenId {
        self.mask
            .as_ref()
            .and_then(|m| m.originals.get(&position).copied())
            .unwrap_or(self.ids[position])
    }

    /// The sequence with every masked position restored.
    pub fn unmasked(&self) -> TokenSequence {
        let mut out = self.clone();
        if let Some(plan) = out.mask.take() {
            for (&p, &id) in &plan.originals {
                out.ids[p] = id;
            }
        }
        out
    }

    /// Quantization levels of the (unmasked) signal run.
    pub fn signal_levels(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        self.signal_positions()
            .map(|p| {
                let id = self.original_id(p);
                vocab
                    .level_of(id)
                    .ok_or(TokenizerError::NotSignal { position: p, id })
            })
            .collect()
    }

    /// Builds a sequence from already-quantized levels.
    pub fn from_levels(levels: &[u32], label: u8, s_min: f64, s_max: f64, vocab: &Vocabulary) -> Self {
        let m = levels.len();
        let mut ids = Vec::with_capacity(m + 4);
        ids.push(CLS);
        ids.extend(levels.iter().map(|&q| vocab.signal_id(q)));
        ids.push(SEP);
        ids.push(vocab.afib_id(label));
        ids.push(SEP);
        Self {
            ids,
            label,
            s_min,
            s_max,
            signal_len: m,
            aug_len: 0,
            degenerate: !(s_max > s_min),
            mask: None,
        }
    }
}

/// Quantizes `segment` and assembles the unmasked input sequence.
pub fn tokenize_segment(segment: &[f64], label: u8, vocab: &Vocabulary) -> TokenSequence {
    let (s_min, s_max) = segment_range(segment);
    let levels = quantize_levels(segment, vocab.levels());
    TokenSequence::from_levels(&levels, label, s_min, s_max, vocab)
}

/// Replaces `round(rate * M)` uniformly chosen signal tokens and the label
/// slot with `[MASK]`. An already masked input is restored first.
pub fn apply_mask(seq: &TokenSequence, rate: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(TokenizerError::InvalidArgument(format!(
            "mask rate {rate} outside [0, 1]"
        )));
    }
    let mut out = seq.unmasked();
    let m = out.signal_len;
    let count = (rate * m as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, m, count)
        .into_iter()
        .map(|i| 1 + i)
        .collect();
    chosen.sort_unstable();

    let mut originals = BTreeMap::new();
    for &p in &chosen {
        originals.insert(p, out.ids[p]);
        out.ids[p] = MASK;
    }
    let afib = out.afib_position();
    originals.insert(afib, out.ids[afib]);
    out.ids[afib] = MASK;
    out.mask = Some(MaskPlan {
        masked_signal_positions: chosen,
        afib_masked: true,
        originals,
    });
    Ok(out)
}

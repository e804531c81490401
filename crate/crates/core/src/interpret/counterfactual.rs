use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InterpretError, Result};
use crate::tokenizer::{MaskPlan, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualKind {
    #[default]
    None,
    Substitution,
    Addition,
    LabelFlip,
}

impl std::str::FromStr for CounterfactualKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "substitution" => Ok(Self::Substitution),
            "addition" => Ok(Self::Addition),
            "label_flip" => Ok(Self::LabelFlip),
            other => Err(format!("unknown counterfactual kind `{other}`")),
        }
    }
}

pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;
pub const DEFAULT_ADDITION_LENGTH: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    pub kind: CounterfactualKind,
    /// Moving-average width for substitution; odd.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Length of the copied run for addition.
    #[serde(default = "default_addition")]
    pub segment_length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    DEFAULT_SMOOTHING_WINDOW
}

fn default_addition() -> usize {
    DEFAULT_ADDITION_LENGTH
}

impl CounterfactualSpec {
    pub fn new(kind: CounterfactualKind) -> Self {
        Self {
            kind,
            window: DEFAULT_SMOOTHING_WINDOW,
            segment_length: DEFAULT_ADDITION_LENGTH,
            seed: 0,
        }
    }

    /// Applies the transform to one sequence. `index` separates the random
    /// draws of different samples under the same spec seed.
    pub fn apply(&self, seq: &TokenSequence, vocab: &Vocabulary, index: u64) -> Result<TokenSequence> {
        match self.kind {
            CounterfactualKind::None => Ok(seq.clone()),
            CounterfactualKind::Substitution => substitute_sequence(seq, self.window, vocab),
            CounterfactualKind::Addition => {
                token_addition(seq, self.segment_length, crate::seed::nth(self.seed, index), vocab)
            }
            CounterfactualKind::LabelFlip => Ok(label_flip(seq, vocab)),
        }
    }
}

/// Centered moving average with replicate padding at both ends.
pub fn token_substitution(segment: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(InterpretError::InvalidArgument(format!(
            "moving-average window must be odd, got {window}"
        )));
    }
    if window > segment.len() {
        return Err(InterpretError::InvalidArgument(format!(
            "window {window} exceeds segment length {}",
            segment.len()
        )));
    }
    let n = segment.len() as isize;
    let half = (window / 2) as isize;
    Ok((0..n)
        .map(|i| {
            let sum: f64 = (i - half..=i + half).map(|j| segment[j.clamp(0, n - 1) as usize]).sum();
            sum / window as f64
        })
        .collect())
}

/// Smooths the signal run of `seq`: levels go to their normalized bin
/// midpoints, through the moving average, and back through quantization.
pub fn substitute_sequence(seq: &TokenSequence, window: usize, vocab: &Vocabulary) -> Result<TokenSequence> {
    let v = vocab.levels();
    let levels = seq.signal_levels(vocab)?;
    let normalized: Vec<f64> = levels.iter().map(|&q| (q as f64 + 0.5) / v as f64).collect();
    let smooth = token_substitution(&normalized, window)?;
    let requantized: Vec<u32> = smooth
        .iter()
        .map(|x| ((x * v as f64).floor().max(0.0) as u32).min(v as u32 - 1))
        .collect();
    let base = seq.unmasked();
    let mut out = base.clone();
    for (p, q) in base.signal_positions().zip(requantized) {
        out.ids[p] = vocab.signal_id(q);
    }
    Ok(remask_like(out, seq))
}

/// Inserts a contiguous run of `length` augmentation tokens copied from the
/// sequence's own levels at a seeded offset, between the signal run and the
/// first `[SEP]`. A mask plan, if present, is carried over with shifted
/// positions; the inserted run is never masked.
pub fn token_addition(seq: &TokenSequence, length: usize, seed: u64, vocab: &Vocabulary) -> Result<TokenSequence> {
    let m = seq.signal_len;
    if length > m {
        return Err(InterpretError::InvalidArgument(format!(
            "addition length {length} exceeds segment length {m}"
        )));
    }
    if seq.aug_len > 0 {
        return Err(InterpretError::InvalidArgument("sequence already carries an augmentation run".into()));
    }
    let levels = seq.signal_levels(vocab)?;
    let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0..=m - length);
    let insert_at = 1 + m;
    let mut out = seq.clone();
    let run = levels[offset..offset + length].iter().map(|&q| vocab.augsig_id(q));
    out.ids.splice(insert_at..insert_at, run);
    out.aug_len = length;
    if let Some(plan) = &seq.mask {
        let shift = |p: usize| if p >= insert_at { p + length } else { p };
        out.mask = Some(MaskPlan {
            masked_signal_positions: plan.masked_signal_positions.clone(),
            afib_masked: plan.afib_masked,
            originals: plan.originals.iter().map(|(&p, &id)| (shift(p), id)).collect(),
        });
    }
    Ok(out)
}

/// Swaps the class of the label slot (and the stored label). Every other
/// token is untouched; applying it twice is the identity.
pub fn label_flip(seq: &TokenSequence, vocab: &Vocabulary) -> TokenSequence {
    let mut out = seq.clone();
    out.label = 1 - seq.label.min(1);
    let flipped = vocab.afib_id(out.label);
    let p = seq.afib_position();
    match out.mask.as_mut().and_then(|m| m.originals.get_mut(&p)) {
        Some(original) => *original = flipped,
        None => out.ids[p] = flipped,
    }
    out
}

fn remask_like(mut unmasked: TokenSequence, like: &TokenSequence) -> TokenSequence {
    if let Some(plan) = &like.mask {
        let mut plan = plan.clone();
        for (&p, original) in plan.originals.iter_mut() {
            *original = unmasked.ids[p];
            unmasked.ids[p] = like.ids[p];
        }
        unmasked.mask = Some(plan);
    }
    unmasked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{apply_mask, tokenize_segment, MASK, SEP};
    use proptest::prelude::*;

    fn wave(m: usize) -> Vec<f64> {
        (0..m).map(|i| (i as f64 * 0.3).sin() + 0.1 * i as f64 % 1.7).collect()
    }

    #[test]
    fn hand_convolution() {
        let out = token_substitution(&[0.0, 1.0, 0.0, 1.0, 0.0], 3).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(token_substitution(&[3.0, -1.0, 2.0], 1).unwrap(), vec![3.0, -1.0, 2.0]);
        assert_eq!(token_substitution(&[2.5; 6], 5).unwrap(), vec![2.5; 6]);
        assert!(token_substitution(&[0.0; 6], 4).is_err());
        assert!(token_substitution(&[0.0; 6], 0).is_err());
        assert!(token_substitution(&[0.0; 3], 5).is_err());
    }

    proptest! {
        #[test]
        fn shift_commutes(x in prop::collection::vec(-5.0f64..5.0, 7..40), c in -3.0f64..3.0, h in 0usize..3) {
            let w = 2 * h + 1;
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let a = token_substitution(&shifted, w).unwrap();
            let b = token_substitution(&x, w).unwrap();
            for (a, b) in a.iter().zip(b) {
                prop_assert!((a - (b + c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn substitution_keeps_layout_and_window_one_is_identity() {
        let vocab = Vocabulary::build(50).unwrap();
        let seq = tokenize_segment(&wave(60), 1, &vocab);
        assert_eq!(substitute_sequence(&seq, 1, &vocab).unwrap(), seq);
        let smooth = substitute_sequence(&seq, 5, &vocab).unwrap();
        assert_eq!(smooth.len(), seq.len());
        assert_eq!(smooth.ids[smooth.afib_position()], seq.ids[seq.afib_position()]);
        assert_ne!(smooth.ids, seq.ids);
        let masked = apply_mask(&seq, 0.5, 3).unwrap();
        let sm = substitute_sequence(&masked, 5, &vocab).unwrap();
        assert_eq!(sm.unmasked(), smooth);
        assert_eq!(sm.mask.as_ref().unwrap().masked_signal_positions, masked.mask.unwrap().masked_signal_positions);
    }

    #[test]
    fn addition_layout() {
        let vocab = Vocabulary::build(250).unwrap();
        let seq = tokenize_segment(&wave(1000), 0, &vocab);
        let aug = token_addition(&seq, 250, 9, &vocab).unwrap();
        assert_eq!(aug.len(), 1254);
        assert_eq!(aug.aug_positions(), 1001..1251);
        assert_eq!(aug.ids[1251], SEP);
        assert_eq!(aug.afib_position(), 1252);
        assert_eq!(aug.ids[1..1001], seq.ids[1..1001]);
        let levels = seq.signal_levels(&vocab).unwrap();
        let first = vocab.aug_level_of(aug.ids[1001]).unwrap();
        let offset = (0..=750).find(|&o| (0..250).all(|i| levels[o + i] == vocab.aug_level_of(aug.ids[1001 + i]).unwrap()));
        assert!(offset.is_some());
        assert_eq!(levels[offset.unwrap()], first);
        let masked = apply_mask(&aug, 0.75, 4).unwrap();
        assert!(masked.aug_positions().all(|p| masked.ids[p] != MASK));
        assert_eq!(masked.mask.as_ref().unwrap().masked_signal_positions.len(), 750);
        assert!(token_addition(&seq, 1001, 0, &vocab).is_err());
    }

    #[test]
    fn addition_carries_mask() {
        let vocab = Vocabulary::build(20).unwrap();
        let seq = tokenize_segment(&wave(40), 1, &vocab);
        let masked = apply_mask(&seq, 0.5, 2).unwrap();
        let a = token_addition(&masked, 10, 5, &vocab).unwrap();
        assert_eq!(a.ids[a.afib_position()], MASK);
        assert_eq!(a.unmasked(), token_addition(&seq, 10, 5, &vocab).unwrap());
    }

    #[test]
    fn label_flip_is_local_involution() {
        let vocab = Vocabulary::build(20).unwrap();
        let seq = tokenize_segment(&wave(30), 0, &vocab);
        let f = label_flip(&seq, &vocab);
        assert_eq!(f.label, 1);
        assert_eq!(f.ids[f.afib_position()], vocab.afib_id(1));
        let diff: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] != f.ids[i]).collect();
        assert_eq!(diff, vec![seq.afib_position()]);
        assert_eq!(label_flip(&f, &vocab), seq);
        let masked = apply_mask(&seq, 0.75, 1).unwrap();
        let fm = label_flip(&masked, &vocab);
        assert_eq!(fm.ids, masked.ids);
        assert_eq!(fm.original_id(fm.afib_position()), vocab.afib_id(1));
        assert_eq!(label_flip(&fm, &vocab), masked);
    }
}

use serde::{Deserialize, Serialize};

use super::{Result, TrainingError};
use crate::model::Matrix;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// The two objective terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean negative log-likelihood over masked signal positions.
    pub l_mlm: f64,
    /// Cross-entropy of the two-way label softmax at the label slot.
    pub l_afib: f64,
    pub total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Number of masked signal positions; `l_mlm * n_masked` is the summed loss.
    pub n_masked: usize,
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Loss terms for one masked sequence.
pub fn compute_losses(
    logits: &Matrix,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    alpha1: f64,
    alpha2: f64,
) -> Result<LossBreakdown> {
    loss_and_grad(logits, seq, vocab, alpha1, alpha2).map(|(b, _)| b)
}

/// Loss terms plus `d total / d logits`.
pub fn loss_and_grad(
    logits: &Matrix,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    alpha1: f64,
    alpha2: f64,
) -> Result<(LossBreakdown, Matrix)> {
    let plan = seq
        .mask
        .as_ref()
        .ok_or_else(|| TrainingError::InvalidArgument("sequence carries no mask plan".into()))?;
    if logits.rows != seq.len() || logits.cols != vocab.size() {
        return Err(TrainingError::InvalidArgument(format!(
            "logits {}x{} do not cover a {}-token sequence over {} ids",
            logits.rows,
            logits.cols,
            seq.len(),
            vocab.size()
        )));
    }
    for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2)] {
        if !(0.0..=1.0).contains(&a) {
            return Err(TrainingError::InvalidArgument(format!("{name} = {a} outside [0, 1]")));
        }
    }
    let masked = &plan.masked_signal_positions;
    if masked.is_empty() && alpha1 > 0.0 {
        return Err(TrainingError::EmptyMask);
    }

    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut logp = vec![0.0; logits.cols];
    let mut l_mlm = 0.0;
    let inv = if masked.is_empty() { 0.0 } else { 1.0 / masked.len() as f64 };
    for &p in masked {
        let target = seq.original_id(p) as usize;
        log_softmax_row(logits.row(p), &mut logp);
        l_mlm -= logp[target];
        let g = grad.row_mut(p);
        for (g, lp) in g.iter_mut().zip(&logp) {
            *g = alpha1 * inv * lp.exp();
        }
        g[target] -= alpha1 * inv;
    }
    l_mlm *= inv;

    let pos = seq.afib_position();
    let truth = vocab
        .afib_class_of(seq.original_id(pos))
        .unwrap_or(seq.label) as usize;
    let ids = [vocab.afib_id(0) as usize, vocab.afib_id(1) as usize];
    let z = [logits.get(pos, ids[0]), logits.get(pos, ids[1])];
    let mut lp = [0.0; 2];
    log_softmax_row(&z, &mut lp);
    let l_afib = -lp[truth];
    for c in 0..2 {
        let y = if c == truth { 1.0 } else { 0.0 };
        grad.set(pos, ids[c], alpha2 * (lp[c].exp() - y));
    }

    Ok((
        LossBreakdown {
            l_mlm,
            l_afib,
            total: alpha1 * l_mlm + alpha2 * l_afib,
            alpha1,
            alpha2,
            n_masked: masked.len(),
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{apply_mask, tokenize_segment};
    use proptest::prelude::*;

    fn masked_seq(vocab: &Vocabulary, label: u8) -> TokenSequence {
        let seg: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        apply_mask(&tokenize_segment(&seg, label, vocab), 0.5, 4).unwrap()
    }

    fn logits_from(seq: &TokenSequence, vocab: &Vocabulary, salt: f64) -> Matrix {
        let mut m = Matrix::zeros(seq.len(), vocab.size());
        for (k, v) in m.data.iter_mut().enumerate() {
            *v = ((k as f64) * 0.37 + salt).sin() * 2.0;
        }
        m
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let vocab = Vocabulary::build(250).unwrap();
        let seq = masked_seq(&vocab, 1);
        let b = compute_losses(&Matrix::zeros(seq.len(), 506), &seq, &vocab, 1.0, 1.0).unwrap();
        assert!((b.l_mlm - 506f64.ln()).abs() < 1e-12);
        assert!((b.l_afib - 2f64.ln()).abs() < 1e-12);
        assert!((b.total - b.l_mlm - b.l_afib).abs() < 1e-12);
        assert_eq!(b.n_masked, 10);
    }

    #[test]
    fn confident_correct_model_has_zero_loss() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked_seq(&vocab, 0);
        let mut logits = Matrix::zeros(seq.len(), vocab.size());
        for p in 0..seq.len() {
            logits.set(p, seq.original_id(p) as usize, 1e4);
        }
        let b = compute_losses(&logits, &seq, &vocab, 1.0, 1.0).unwrap();
        assert!(b.total.abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked_seq(&vocab, 0);
        let logits = Matrix::zeros(seq.len(), vocab.size());
        assert!(compute_losses(&logits, &seq.unmasked(), &vocab, 1.0, 1.0).is_err());
        assert!(compute_losses(&Matrix::zeros(3, vocab.size()), &seq, &vocab, 1.0, 1.0).is_err());
        let none = apply_mask(&seq, 0.0, 0).unwrap();
        assert!(matches!(compute_losses(&logits, &none, &vocab, 1.0, 1.0), Err(TrainingError::EmptyMask)));
        assert!(compute_losses(&logits, &none, &vocab, 0.0, 1.0).is_ok());
    }

    #[test]
    fn locality() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked_seq(&vocab, 1);
        let base = logits_from(&seq, &vocab, 0.0);
        let b0 = compute_losses(&base, &seq, &vocab, 1.0, 1.0).unwrap();
        let plan = seq.mask.as_ref().unwrap();
        let mut other = base.clone();
        for p in 0..seq.len() {
            if !plan.masked_signal_positions.contains(&p) && p != seq.afib_position() {
                other.row_mut(p).iter_mut().for_each(|v| *v += 3.0);
            }
        }
        assert_eq!(compute_losses(&other, &seq, &vocab, 1.0, 1.0).unwrap(), b0);
        let mut only_afib = base.clone();
        only_afib.set(seq.afib_position(), vocab.afib_id(0) as usize, 9.0);
        let b1 = compute_losses(&only_afib, &seq, &vocab, 1.0, 1.0).unwrap();
        assert_eq!(b1.l_mlm, b0.l_mlm);
        assert_ne!(b1.l_afib, b0.l_afib);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocabulary::build(10).unwrap();
        let seq = masked_seq(&vocab, 1);
        let logits = logits_from(&seq, &vocab, 1.0);
        let (_, g) = loss_and_grad(&logits, &seq, &vocab, 0.7, 0.4).unwrap();
        let h = 1e-6;
        for k in 0..logits.data.len() {
            let mut p = logits.clone();
            p.data[k] += h;
            let mut m = logits.clone();
            m.data[k] -= h;
            let fd = (compute_losses(&p, &seq, &vocab, 0.7, 0.4).unwrap().total
                - compute_losses(&m, &seq, &vocab, 0.7, 0.4).unwrap().total)
                / (2.0 * h);
            assert!((fd - g.data[k]).abs() < 1e-7, "{k}: {fd} vs {}", g.data[k]);
        }
    }

    proptest! {
        #[test]
        fn weighted_sum_identity(a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, salt in -10.0f64..10.0) {
            let vocab = Vocabulary::build(10).unwrap();
            let seq = masked_seq(&vocab, (salt > 0.0) as u8);
            let b = compute_losses(&logits_from(&seq, &vocab, salt), &seq, &vocab, a1, a2).unwrap();
            prop_assert!(b.l_mlm >= 0.0 && b.l_afib >= 0.0);
            prop_assert!((b.total - (a1 * b.l_mlm + a2 * b.l_afib)).abs() < 1e-12);
        }
    }
}

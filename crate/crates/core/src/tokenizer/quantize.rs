use super::{Result, TokenId, TokenizerError, Vocabulary};

/// Minimum and maximum of a segment.
pub fn segment_range(segment: &[f64]) -> (f64, f64) {
    segment
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Min-max normalizes the segment to [0, 1] and maps each sample to
/// `floor(norm * levels)`, clamped to `levels - 1`. A constant segment maps
/// to all zeros.
pub fn quantize_levels(segment: &[f64], levels: usize) -> Vec<u32> {
    let (lo, hi) = segment_range(segment);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0; segment.len()];
    }
    let top = (levels - 1) as f64;
    segment
        .iter()
        .map(|&x| (((x - lo) / span) * levels as f64).floor().min(top) as u32)
        .collect()
}

/// Bin-midpoint inverse of [`quantize_levels`]:
/// `s_min + (q + 0.5) / levels * (s_max - s_min)`.
pub fn detokenize(levels: &[u32], s_min: f64, s_max: f64, n_levels: usize) -> Vec<f64> {
    let width = (s_max - s_min) / n_levels as f64;
    levels
        .iter()
        .map(|&q| s_min + (q as f64 + 0.5) * width)
        .collect()
}

/// [`detokenize`] over `signal_*` token IDs.
pub fn detokenize_ids(ids: &[TokenId], s_min: f64, s_max: f64, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let levels = ids
        .iter()
        .enumerate()
        .map(|(position, &id)| {
            vocab
                .level_of(id)
                .ok_or(TokenizerError::NotSignal { position, id })
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(detokenize(&levels, s_min, s_max, vocab.levels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_computed_levels() {
        assert_eq!(quantize_levels(&[1.0, 2.0, 3.0, 4.0], 250), vec![0, 83, 166, 249]);
        assert_eq!(quantize_levels(&[5.0, 5.0, 5.0], 250), vec![0, 0, 0]);
        assert_eq!(quantize_levels(&[5.0, 5.0, 5.0], 3), vec![0, 0, 0]);
    }

    #[test]
    fn midpoints() {
        let out = detokenize(&[0, 249], -2.0, 2.0, 250);
        assert_abs_diff_eq!(out[0], -1.992, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.992, epsilon = 1e-12);
    }

    #[test]
    fn non_signal_id_is_named() {
        let v = Vocabulary::build(4).unwrap();
        let ids = [v.signal_id(0), v.afib_id(1)];
        match detokenize_ids(&ids, 0.0, 1.0, &v) {
            Err(TokenizerError::NotSignal { position: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn monotone_and_bounded(seg in proptest::collection::vec(-50.0f64..50.0, 2..80), levels in 2usize..300) {
            let q = quantize_levels(&seg, levels);
            let (lo, hi) = segment_range(&seg);
            for a in 0..seg.len() {
                proptest::prop_assert!((q[a] as usize) < levels);
                for b in 0..seg.len() {
                    if seg[a] <= seg[b] {
                        proptest::prop_assert!(q[a] <= q[b]);
                    }
                }
            }
            if hi > lo {
                let back = detokenize(&q, lo, hi, levels);
                let bound = (hi - lo) / levels as f64;
                for (x, y) in seg.iter().zip(&back) {
                    proptest::prop_assert!((x - y).abs() <= bound + 1e-12);
                }
                let imin = seg.iter().position(|&x| x == lo).unwrap();
                let imax = seg.iter().position(|&x| x == hi).unwrap();
                proptest::prop_assert_eq!(q[imin], 0);
                proptest::prop_assert_eq!(q[imax] as usize, levels - 1);
            }
        }
    }
}

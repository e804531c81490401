//! Sparse attention patterns: sliding window + global positions + optional
//! seeded random targets, stored row-wise in compressed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;

/// Admissible key positions for every query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    seq_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl AttentionPattern {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Sorted admissible keys of query row `p`.
    #[inline]
    pub fn row(&self, p: usize) -> &[usize] {
        &self.indices[self.offsets[p]..self.offsets[p + 1]]
    }

    #[inline]
    pub fn row_offset(&self, p: usize) -> usize {
        self.offsets[p]
    }

    /// Total admissible (row, key) pairs.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn admits(&self, p: usize, j: usize) -> bool {
        self.row(p).binary_search(&j).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.nnz() == self.seq_len * self.seq_len
    }

    /// Pattern from explicit per-row key lists (sorted and deduplicated here).
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let seq_len = rows.len();
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            assert!(r.iter().all(|&j| j < seq_len), "key outside sequence");
            indices.extend(r);
            offsets.push(indices.len());
        }
        Self {
            seq_len,
            offsets,
            indices,
        }
    }

    pub fn full(seq_len: usize) -> Self {
        Self {
            seq_len,
            offsets: (0..=seq_len).map(|p| p * seq_len).collect(),
            indices: (0..seq_len).flat_map(|_| 0..seq_len).collect(),
        }
    }
}

/// Resolves configured global positions (negative values count from the end)
/// against a concrete sequence length.
pub fn resolve_globals(globals: &[i64], seq_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = globals
        .iter()
        .filter_map(|&g| {
            let p = if g < 0 { seq_len as i64 + g } else { g };
            (0..seq_len as i64).contains(&p).then_some(p as usize)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Pattern for a `seq_len` input: each position sees `[p - w/2, p + w/2]`,
/// every global position, and `random_blocks_per_row` seeded extra keys;
/// global rows see everything.
pub fn attention_pattern(config: &ModelConfig, seq_len: usize, seed: u64) -> AttentionPattern {
    let half = config.window_size / 2;
    let globals = resolve_globals(&config.global_positions, seq_len);
    let mut is_global = vec![false; seq_len];
    for &g in &globals {
        is_global[g] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (seq_len as u64).rotate_left(32));
    let mut offsets = Vec::with_capacity(seq_len + 1);
    let mut indices = Vec::new();
    offsets.push(0);
    let mut row = Vec::new();
    for p in 0..seq_len {
        row.clear();
        if is_global[p] {
            row.extend(0..seq_len);
        } else {
            row.extend(p.saturating_sub(half)..(p + half + 1).min(seq_len));
            row.extend_from_slice(&globals);
        }
        for _ in 0..config.random_blocks_per_row {
            row.push(rng.random_range(0..seq_len));
        }
        row.sort_unstable();
        row.dedup();
        indices.extend_from_slice(&row);
        offsets.push(indices.len());
    }
    AttentionPattern {
        seq_len,
        offsets,
        indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(window: usize, globals: Vec<i64>, randoms: usize) -> ModelConfig {
        ModelConfig {
            window_size: window,
            global_positions: globals,
            random_blocks_per_row: randoms,
            ..ModelConfig::desk_scale(10)
        }
    }

    #[test]
    fn window_and_global_enumeration() {
        let pat = attention_pattern(&config(3, vec![0], 0), 5, 0);
        assert_eq!(pat.row(2), &[0, 1, 2, 3]);
        assert_eq!(pat.row(0), &[0, 1, 2, 3, 4]);
        assert_eq!(pat.row(4), &[0, 3, 4]);
    }

    #[test]
    fn label_slot_is_global() {
        let pat = attention_pattern(&config(3, vec![0, -2], 0), 9, 0);
        assert_eq!(pat.row(0).len(), 9);
        assert_eq!(pat.row(7).len(), 9);
        for p in 0..9 {
            assert!(pat.admits(p, 0) && pat.admits(p, 7) && pat.admits(p, p));
        }
    }

    #[test]
    fn saturated_window_is_full() {
        let pat = attention_pattern(&config(20, vec![], 0), 10, 0);
        assert_eq!(pat, AttentionPattern::full(10));
    }

    #[test]
    fn seed_matters_only_with_random_blocks() {
        let c = config(3, vec![0], 0);
        assert_eq!(attention_pattern(&c, 30, 1), attention_pattern(&c, 30, 2));
        let c = config(3, vec![0], 2);
        assert_ne!(attention_pattern(&c, 30, 1), attention_pattern(&c, 30, 2));
        assert_eq!(attention_pattern(&c, 30, 1), attention_pattern(&c, 30, 1));
        let pat = attention_pattern(&c, 30, 1);
        assert!((0..30).all(|p| pat.admits(p, p)));
    }
}

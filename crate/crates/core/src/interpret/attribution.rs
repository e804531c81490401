use serde::{Deserialize, Serialize};

use super::{InterpretError, Result};
use crate::model::{ForwardTrace, Matrix, ModelError, ModelState};
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary, PAD};

pub const DEFAULT_IG_STEPS: usize = 64;

/// Scalar read off the logits that attributions explain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgTarget {
    /// `logit(afib_1) - logit(afib_0)` at the label slot.
    AfibLogit,
    /// Logit of `token` at `position`.
    Token { position: usize, token: TokenId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub per_token_scores: Vec<f64>,
    /// `sum(per_token_scores) - (F(x) - F(x'))`
    pub completeness_residual: f64,
    pub f_input: f64,
    pub f_baseline: f64,
    pub target_description: String,
    pub baseline_description: String,
    pub steps: usize,
}

impl AttributionReport {
    /// Residual relative to the output difference being explained.
    pub fn relative_residual(&self) -> f64 {
        self.completeness_residual.abs() / (self.f_input - self.f_baseline).abs()
    }
}

/// Integrated gradients of a scalar function along the straight path from
/// `baseline` to `x`, midpoint rule with `steps` evaluations.
/// `grad(point)` returns the gradient of the function at `point`.
pub fn integrated_gradients_with<G>(x: &[f64], baseline: &[f64], steps: usize, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(InterpretError::InvalidArgument("steps must be at least 1".into()));
    }
    if x.len() != baseline.len() {
        return Err(InterpretError::InvalidArgument("input and baseline differ in length".into()));
    }
    let mut total = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        for ((p, a), b) in point.iter_mut().zip(x).zip(baseline) {
            *p = b + alpha * (a - b);
        }
        let g = grad(k, &point)?;
        if g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(InterpretError::NonFiniteGradient { step: k });
        }
        total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
    }
    Ok(total
        .iter()
        .zip(x)
        .zip(baseline)
        .map(|((t, a), b)| (a - b) * t / steps as f64)
        .collect())
}

fn target_objective(target: IgTarget, afib_position: usize, vocab: &Vocabulary) -> impl Fn(&Matrix) -> (f64, Matrix) {
    let (pos, plus, minus) = match target {
        IgTarget::AfibLogit => (
            afib_position,
            vocab.afib_id(1) as usize,
            Some(vocab.afib_id(0) as usize),
        ),
        IgTarget::Token { position, token } => (position, token as usize, None),
    };
    move |logits: &Matrix| {
        let mut g = Matrix::zeros(logits.rows, logits.cols);
        let mut v = logits.get(pos, plus);
        g.set(pos, plus, 1.0);
        if let Some(m) = minus {
            v -= logits.get(pos, m);
            g.set(pos, m, -1.0);
        }
        (v, g)
    }
}

/// Integrated gradients through the token-embedding input with an all-`[PAD]`
/// baseline of the same length. One score per token: the attribution summed
/// over embedding dimensions.
pub fn integrated_gradients(
    state: &ModelState,
    seq: &TokenSequence,
    target: IgTarget,
    steps: usize,
    vocab: &Vocabulary,
) -> Result<AttributionReport> {
    if let IgTarget::Token { position, token } = target {
        if position >= seq.len() || token as usize >= vocab.size() {
            return Err(InterpretError::InvalidArgument(format!(
                "target token {token} at position {position} out of range"
            )));
        }
    }
    let x = state.lookup(&seq.ids)?;
    let baseline = state.lookup(&vec![PAD; seq.len()])?;
    let objective = target_objective(target, seq.afib_position(), vocab);
    let (rows, cols) = (x.rows, x.cols);
    let attr = integrated_gradients_with(&x.data, &baseline.data, steps, |k, point| {
        let emb = Matrix::from_vec(rows, cols, point.to_vec());
        match state.input_gradient(&emb, &objective) {
            Ok((_, g)) => Ok(g.data),
            Err(ModelError::NonFiniteLoss(_)) => Err(InterpretError::NonFiniteGradient { step: k }),
            Err(e) => Err(e.into()),
        }
    })?;
    let scores: Vec<f64> = attr.chunks(cols).map(|c| c.iter().sum()).collect();
    let f_input = objective(&state.forward_from_embeddings(&x)?).0;
    let f_baseline = objective(&state.forward_from_embeddings(&baseline)?).0;
    Ok(AttributionReport {
        completeness_residual: scores.iter().sum::<f64>() - (f_input - f_baseline),
        per_token_scores: scores,
        f_input,
        f_baseline,
        target_description: match target {
            IgTarget::AfibLogit => format!("logit(afib_1) - logit(afib_0) at position {}", seq.afib_position()),
            IgTarget::Token { position, token } => format!("logit of token {token} at position {position}"),
        },
        baseline_description: format!("{} x [PAD] token embeddings", seq.len()),
        steps,
    })
}

/// Attention received by each position, averaged over layers and heads.
/// For every layer/head the weights landing on key `j` are averaged over the
/// rows whose pattern admits `j`; the result is normalized to sum to 1.
pub fn attention_summary(trace: &ForwardTrace) -> Vec<f64> {
    let n = trace.pattern.seq_len();
    let mut received = vec![0.0; n];
    let mut admitted = vec![0usize; n];
    for p in 0..n {
        for &j in trace.pattern.row(p) {
            admitted[j] += 1;
        }
    }
    for l in 0..trace.n_layers() {
        for h in 0..trace.n_heads() {
            for p in 0..n {
                let (keys, w) = trace.row(l, h, p);
                for (&j, &a) in keys.iter().zip(w) {
                    received[j] += a;
                }
            }
        }
    }
    let mut summary: Vec<f64> = received
        .iter()
        .zip(&admitted)
        .map(|(&r, &c)| if c == 0 { 0.0 } else { r / c as f64 })
        .collect();
    let total: f64 = summary.iter().sum();
    if total > 0.0 {
        summary.iter_mut().for_each(|v| *v /= total);
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionPattern, ModelConfig};
    use crate::tokenizer::tokenize_segment;

    #[test]
    fn linear_surrogate_is_exact() {
        let w = [0.5, -2.0, 3.0, 0.25];
        let x = [1.0, 2.0, -1.0, 4.0];
        let b = [0.1, 0.0, 0.5, -1.0];
        for steps in [1, 2, 7, 64] {
            let a = integrated_gradients_with(&x, &b, steps, |_, _| Ok(w.to_vec())).unwrap();
            for i in 0..4 {
                assert!((a[i] - (x[i] - b[i]) * w[i]).abs() < 1e-12);
            }
        }
        assert!(integrated_gradients_with(&x, &b, 0, |_, _| Ok(w.to_vec())).is_err());
        let bad = integrated_gradients_with(&x, &b, 4, |k, _| Ok(vec![if k == 2 { f64::NAN } else { 1.0 }; 4]));
        assert!(matches!(bad, Err(InterpretError::NonFiniteGradient { step: 2 })));
    }

    #[test]
    fn quadratic_converges() {
        // F(x) = sum x^2, baseline 0: exact attribution x_i^2 for any midpoint count
        let x = [1.0, -2.0, 0.5];
        let a = integrated_gradients_with(&x, &[0.0; 3], 3, |_, p| Ok(p.iter().map(|v| 2.0 * v).collect())).unwrap();
        for i in 0..3 {
            assert!((a[i] - x[i] * x[i]).abs() < 1e-12);
        }
    }

    fn tiny() -> (ModelState, Vocabulary) {
        let vocab = Vocabulary::build(6).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 32,
            window_size: 4,
            global_positions: vec![0, -2],
            random_blocks_per_row: 0,
            tie_output: true,
            seed: 3,
        };
        (ModelState::init(config).unwrap(), vocab)
    }

    #[test]
    fn all_pad_input_has_zero_attribution() {
        let (state, vocab) = tiny();
        let mut seq = tokenize_segment(&[0.0, 1.0, 3.0, 2.0, 1.0, 0.5], 1, &vocab);
        seq.ids = vec![PAD; seq.len()];
        let r = integrated_gradients(&state, &seq, IgTarget::AfibLogit, 16, &vocab).unwrap();
        assert!(r.per_token_scores.iter().all(|&s| s == 0.0));
        assert_eq!(r.completeness_residual, 0.0);
    }

    #[test]
    fn completeness_on_untrained_model() {
        let (state, vocab) = tiny();
        let seq = tokenize_segment(&[0.0, 1.0, 3.0, 2.0, 1.0, 0.5, -1.0, 0.2], 0, &vocab);
        let coarse = integrated_gradients(&state, &seq, IgTarget::AfibLogit, 8, &vocab).unwrap();
        let fine = integrated_gradients(&state, &seq, IgTarget::AfibLogit, 256, &vocab).unwrap();
        assert_eq!(fine.per_token_scores.len(), seq.len());
        assert!(fine.relative_residual() < 0.02, "{}", fine.relative_residual());
        assert!(fine.completeness_residual.abs() <= coarse.completeness_residual.abs() + 1e-9);
        let again = integrated_gradients(&state, &seq, IgTarget::AfibLogit, 256, &vocab).unwrap();
        assert_eq!(fine, again);
        let tok = IgTarget::Token { position: 2, token: vocab.signal_id(1) };
        assert!(integrated_gradients(&state, &seq, tok, 32, &vocab).unwrap().relative_residual() < 0.05);
    }

    fn trace(rows: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> ForwardTrace {
        let pattern = AttentionPattern::from_rows(rows);
        let n = pattern.seq_len();
        ForwardTrace {
            pattern,
            attention: vec![vec![weights.concat()]],
            hidden: Matrix::zeros(n, 1),
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_summary() {
        let t = trace(vec![vec![0, 1, 2]; 3], vec![vec![1.0 / 3.0; 3]; 3]);
        for v in attention_summary(&t) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_built_sparse_trace() {
        // token 2 is admitted only by row 2
        let t = trace(
            vec![vec![0, 1], vec![0, 1], vec![0, 1, 2]],
            vec![vec![0.5, 0.5], vec![0.25, 0.75], vec![0.2, 0.2, 0.6]],
        );
        // column means: 0 -> (0.5+0.25+0.2)/3, 1 -> (0.5+0.75+0.2)/3, 2 -> 0.6/1
        let raw = [0.95 / 3.0, 1.45 / 3.0, 0.6];
        let total: f64 = raw.iter().sum();
        let s = attention_summary(&t);
        for (a, b) in s.iter().zip(raw) {
            assert!((a - b / total).abs() < 1e-12);
        }
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

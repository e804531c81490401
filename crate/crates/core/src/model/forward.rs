//! Forward pass, attention traces and reverse-mode gradients.

use super::matrix::{axpy, dot, gemm};
use super::{AttentionPattern, LayerWeights, Matrix, ModelError, ModelState, Result, Weights};
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Attention weights of one forward pass, aligned with `pattern`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pattern: AttentionPattern,
    /// `attention[layer][head][k]` is the weight of the `k`-th admissible
    /// (row, key) pair in pattern order.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Final (post layer-norm) hidden states.
    pub hidden: Matrix,
}

impl ForwardTrace {
    pub fn n_layers(&self) -> usize {
        self.attention.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attention.first().map_or(0, Vec::len)
    }

    /// Weights of query row `p` for one layer/head, paired with key indices.
    pub fn row(&self, layer: usize, head: usize, p: usize) -> (&[usize], &[f64]) {
        let keys = self.pattern.row(p);
        let off = self.pattern.row_offset(p);
        (keys, &self.attention[layer][head][off..off + keys.len()])
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub trace: Option<ForwardTrace>,
}

/// Scalar objective over the logits: returns its value and `d value / d logits`.
pub trait LossFn {
    fn value_and_grad(&self, logits: &Matrix) -> (f64, Matrix);
}

impl<F> LossFn for F
where
    F: Fn(&Matrix) -> (f64, Matrix),
{
    fn value_and_grad(&self, logits: &Matrix) -> (f64, Matrix) {
        self(logits)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Ids(&'a [TokenId]),
    /// Token-embedding rows; position embeddings are added inside the model.
    Embeddings(&'a Matrix),
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: f64,
    pub params: Weights,
    /// Gradient with respect to the token-embedding input rows.
    pub input: Matrix,
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Vec<f64>>,
    ctx: Matrix,
    ln2: LnCache,
    h2: Matrix,
    u: Matrix,
    g: Matrix,
}

struct Tape {
    pattern: AttentionPattern,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Matrix,
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LnCache) {
    let d = x.cols;
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut y = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for c in 0..d {
            xh[c] = (row[c] - mean) * is;
        }
        let yr = y.row_mut(i);
        for c in 0..d {
            yr[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let d = dy.cols;
    if let Some((dg, db)) = grads {
        for i in 0..dy.rows {
            let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
                db[c] += dyr[c];
            }
        }
    }
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        for c in 0..d {
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for c in 0..d {
            out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul(w);
    for i in 0..y.rows {
        y.row_mut(i).iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
    y
}

/// Returns `dx`; accumulates `dw += x^T dy` and `db += colsum(dy)` when given.
fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, grads: Option<(&mut Matrix, &mut [f64])>) -> Matrix {
    if let Some((dw, db)) = grads {
        gemm(1.0, x, true, dy, false, 1.0, dw);
        for i in 0..dy.rows {
            db.iter_mut().zip(dy.row(i)).for_each(|(b, g)| *b += g);
        }
    }
    dy.matmul_t(w)
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, pattern: &AttentionPattern, n_heads: usize) -> (Matrix, Vec<Vec<f64>>) {
    let n = q.rows;
    let dh = q.cols / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, q.cols);
    let mut weights = vec![vec![0.0; pattern.nnz()]; n_heads];
    for (h, w) in weights.iter_mut().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for p in 0..n {
            let keys = pattern.row(p);
            let off = pattern.row_offset(p);
            let a = &mut w[off..off + keys.len()];
            let qp = &q.row(p)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, &j) in a.iter_mut().zip(keys) {
                *s = scale * dot(qp, &k.row(j)[cols.clone()]);
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in a.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut ctx.row_mut(p)[cols.clone()];
            for (s, &j) in a.iter_mut().zip(keys) {
                *s /= sum;
                axpy(*s, &v.row(j)[cols.clone()], out);
            }
        }
    }
    (ctx, weights)
}

fn attention_backward(
    dctx: &Matrix,
    cache: &LayerCache,
    pattern: &AttentionPattern,
    n_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let n = q.rows;
    let dh = q.cols / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(n, q.cols);
    let mut dk = Matrix::zeros(n, q.cols);
    let mut dv = Matrix::zeros(n, q.cols);
    let mut da = Vec::new();
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for p in 0..n {
            let keys = pattern.row(p);
            let off = pattern.row_offset(p);
            let a = &cache.attn[h][off..off + keys.len()];
            let g = &dctx.row(p)[cols.clone()];
            da.clear();
            let mut weighted = 0.0;
            for (&aj, &j) in a.iter().zip(keys) {
                let d = dot(g, &v.row(j)[cols.clone()]);
                weighted += aj * d;
                da.push(d);
                axpy(aj, g, &mut dv.row_mut(j)[cols.clone()]);
            }
            let qp = &q.row(p)[cols.clone()];
            for ((&aj, &d), &j) in a.iter().zip(&da).zip(keys) {
                let ds = scale * aj * (d - weighted);
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &k.row(j)[cols.clone()], &mut dq.row_mut(p)[cols.clone()]);
                axpy(ds, qp, &mut dk.row_mut(j)[cols.clone()]);
            }
        }
    }
    (dq, dk, dv)
}

impl ModelState {
    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        if len == 0 {
            return Err(ModelError::Dimension("empty input".into()));
        }
        Ok(())
    }

    fn block(&self, l: &LayerWeights, x: &mut Matrix, pattern: &AttentionPattern) -> LayerCache {
        let (h1, ln1) = layer_norm(x, &l.ln1_g, &l.ln1_b);
        let q = linear(&h1, &l.wq, &l.bq);
        let k = linear(&h1, &l.wk, &l.bk);
        let v = linear(&h1, &l.wv, &l.bv);
        let (ctx, attn) = attention(&q, &k, &v, pattern, self.config.n_heads);
        x.add_assign(&linear(&ctx, &l.wo, &l.bo));
        let (h2, ln2) = layer_norm(x, &l.ln2_g, &l.ln2_b);
        let u = linear(&h2, &l.w1, &l.b1);
        let g = Matrix::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
        x.add_assign(&linear(&g, &l.w2, &l.b2));
        LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            h2,
            u,
            g,
        }
    }

    /// Runs the encoder. With `keep_tape` every layer cache is retained for
    /// backprop; otherwise only attention weights survive (for the trace).
    fn run(&self, emb: &Matrix, keep_tape: bool) -> Result<(Matrix, Tape, Vec<Vec<Vec<f64>>>)> {
        if emb.cols != self.config.d_model {
            return Err(ModelError::Dimension(format!(
                "embedding width {} != d_model {}",
                emb.cols, self.config.d_model
            )));
        }
        let n = emb.rows;
        self.check_len(n)?;
        let w = &self.weights;
        let pattern = self.pattern(n);
        let mut x = emb.clone();
        for i in 0..n {
            axpy(1.0, w.pos_emb.row(i), x.row_mut(i));
        }
        let mut layers = Vec::with_capacity(if keep_tape { w.layers.len() } else { 0 });
        let mut attention = Vec::with_capacity(w.layers.len());
        for l in &w.layers {
            let mut cache = self.block(l, &mut x, &pattern);
            if keep_tape {
                layers.push(cache);
            } else {
                attention.push(std::mem::take(&mut cache.attn));
            }
        }
        if keep_tape {
            attention = layers.iter().map(|c| c.attn.clone()).collect();
        }
        let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
        let mut logits = match &w.out_w {
            None => hf.matmul_t(&w.tok_emb),
            Some(out) => hf.matmul(out),
        };
        for i in 0..n {
            logits.row_mut(i).iter_mut().zip(&w.out_b).for_each(|(v, b)| *v += b);
        }
        Ok((
            logits,
            Tape {
                pattern,
                layers,
                lnf,
                hf,
            },
            attention,
        ))
    }

    /// Logits (`seq_len x vocab_size`) for a token sequence, plus the
    /// attention trace when `want_trace` is set.
    pub fn forward(&self, ids: &[TokenId], want_trace: bool) -> Result<ForwardOutput> {
        self.check_len(ids.len())?;
        let emb = self.lookup(ids)?;
        self.forward_embeddings_traced(&emb, want_trace)
    }

    /// Same computation as [`ModelState::forward`] after the token lookup.
    pub fn forward_from_embeddings(&self, embeddings: &Matrix) -> Result<Matrix> {
        Ok(self.forward_embeddings_traced(embeddings, false)?.logits)
    }

    pub fn forward_embeddings_traced(&self, embeddings: &Matrix, want_trace: bool) -> Result<ForwardOutput> {
        let (logits, tape, attention) = self.run(embeddings, false)?;
        let trace = want_trace.then(|| ForwardTrace {
            pattern: tape.pattern,
            attention,
            hidden: tape.hf,
        });
        Ok(ForwardOutput { logits, trace })
    }

    fn backward(&self, tape: &Tape, dlogits: &Matrix, mut grads: Option<&mut Weights>) -> Matrix {
        let w = &self.weights;
        let n = dlogits.rows;
        let dhf = match &w.out_w {
            None => {
                if let Some(g) = grads.as_deref_mut() {
                    gemm(1.0, dlogits, true, &tape.hf, false, 1.0, &mut g.tok_emb);
                }
                dlogits.matmul(&w.tok_emb)
            }
            Some(out) => {
                if let Some(g) = grads.as_deref_mut() {
                    gemm(1.0, &tape.hf, true, dlogits, false, 1.0, g.out_w.as_mut().unwrap());
                }
                dlogits.matmul_t(out)
            }
        };
        if let Some(g) = grads.as_deref_mut() {
            for i in 0..n {
                g.out_b.iter_mut().zip(dlogits.row(i)).for_each(|(b, d)| *b += d);
            }
        }
        let mut dx = layer_norm_backward(
            &dhf,
            &tape.lnf,
            &w.lnf_g,
            grads.as_deref_mut().map(|g| (&mut g.lnf_g[..], &mut g.lnf_b[..])),
        );

        for (li, (l, cache)) in w.layers.iter().zip(&tape.layers).enumerate().rev() {
            let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[li]);
            // feed-forward branch
            let dg = linear_backward(&cache.g, &l.w2, &dx, lg.as_deref_mut().map(|g| (&mut g.w2, &mut g.b2[..])));
            let du = Matrix::from_vec(
                dg.rows,
                dg.cols,
                dg.data.iter().zip(&cache.u.data).map(|(d, &u)| d * gelu_grad(u)).collect(),
            );
            let dh2 = linear_backward(&cache.h2, &l.w1, &du, lg.as_deref_mut().map(|g| (&mut g.w1, &mut g.b1[..])));
            dx.add_assign(&layer_norm_backward(
                &dh2,
                &cache.ln2,
                &l.ln2_g,
                lg.as_deref_mut().map(|g| (&mut g.ln2_g[..], &mut g.ln2_b[..])),
            ));
            // attention branch
            let dctx = linear_backward(&cache.ctx, &l.wo, &dx, lg.as_deref_mut().map(|g| (&mut g.wo, &mut g.bo[..])));
            let (dq, dk, dv) = attention_backward(&dctx, cache, &tape.pattern, self.config.n_heads);
            let mut dh1 = linear_backward(&cache.h1, &l.wq, &dq, lg.as_deref_mut().map(|g| (&mut g.wq, &mut g.bq[..])));
            dh1.add_assign(&linear_backward(&cache.h1, &l.wk, &dk, lg.as_deref_mut().map(|g| (&mut g.wk, &mut g.bk[..]))));
            dh1.add_assign(&linear_backward(&cache.h1, &l.wv, &dv, lg.as_deref_mut().map(|g| (&mut g.wv, &mut g.bv[..]))));
            dx.add_assign(&layer_norm_backward(
                &dh1,
                &cache.ln1,
                &l.ln1_g,
                lg.as_deref_mut().map(|g| (&mut g.ln1_g[..], &mut g.ln1_b[..])),
            ));
        }
        if let Some(g) = grads {
            for i in 0..n {
                axpy(1.0, dx.row(i), g.pos_emb.row_mut(i));
            }
        }
        dx
    }

    /// Exact reverse-mode gradients of `loss(forward(input))` for every
    /// parameter and for the token-embedding input.
    pub fn gradients(&self, input: ModelInput<'_>, loss: &dyn LossFn) -> Result<GradientOutput> {
        let emb = match input {
            ModelInput::Ids(ids) => {
                self.check_len(ids.len())?;
                self.lookup(ids)?
            }
            ModelInput::Embeddings(e) => e.clone(),
        };
        let (logits, tape, _) = self.run(&emb, true)?;
        let (value, dlogits) = loss.value_and_grad(&logits);
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss(value));
        }
        let mut params = Weights::zeros(&self.config);
        let input_grad = self.backward(&tape, &dlogits, Some(&mut params));
        if let ModelInput::Ids(ids) = input {
            for (p, &id) in ids.iter().enumerate() {
                axpy(1.0, input_grad.row(p), params.tok_emb.row_mut(id as usize));
            }
        }
        Ok(GradientOutput {
            loss: value,
            params,
            input: input_grad,
        })
    }

    /// Value and input gradient of a scalar objective, skipping parameter
    /// gradients.
    pub fn input_gradient(&self, embeddings: &Matrix, objective: &dyn LossFn) -> Result<(f64, Matrix)> {
        let (logits, tape, _) = self.run(embeddings, true)?;
        let (value, dlogits) = objective.value_and_grad(&logits);
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss(value));
        }
        Ok((value, self.backward(&tape, &dlogits, None)))
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, ModelConfig};

/// Per-layer parameters of a pre-norm encoder block. Projection matrices
/// are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2",
    "b2",
];

impl LayerWeights {
    fn parts(&self) -> [&[f64]; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq.data,
            &self.bq,
            &self.wk.data,
            &self.bk,
            &self.wv.data,
            &self.bv,
            &self.wo.data,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 16] {
        let Self {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        } = self;
        [
            ln1_g,
            ln1_b,
            &mut wq.data,
            bq,
            &mut wk.data,
            bk,
            &mut wv.data,
            bv,
            &mut wo.data,
            bo,
            ln2_g,
            ln2_b,
            &mut w1.data,
            b1,
            &mut w2.data,
            b2,
        ]
    }
}

/// Every trainable tensor of the model. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// Untied output projection (`d_model x vocab`); `None` when tied to `tok_emb`.
    pub out_w: Option<Matrix>,
    pub out_b: Vec<f64>,
}

impl Weights {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ffn;
        let layer = LayerWeights {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            wk: Matrix::zeros(d, d),
            bk: vec![0.0; d],
            wv: Matrix::zeros(d, d),
            bv: vec![0.0; d],
            wo: Matrix::zeros(d, d),
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: Matrix::zeros(d, f),
            b1: vec![0.0; f],
            w2: Matrix::zeros(f, d),
            b2: vec![0.0; d],
        };
        Self {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers: vec![layer; config.n_layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            out_w: (!config.tie_output).then(|| Matrix::zeros(d, config.vocab_size)),
            out_b: vec![0.0; config.vocab_size],
        }
    }

    /// Seeded initialization: matrices uniform in `±sqrt(3 / fan_in)`,
    /// embeddings uniform in `±0.05`, biases 0, norm gains 1.
    pub fn init(config: &ModelConfig) -> Self {
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |data: &mut [f64], bound: f64| {
            for v in data.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut w.tok_emb.data, 0.05);
        fill(&mut w.pos_emb.data, 0.05);
        for l in &mut w.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                let bound = (3.0 / m.rows as f64).sqrt();
                fill(&mut m.data, bound);
            }
        }
        w.lnf_g.fill(1.0);
        if let Some(out) = &mut w.out_w {
            let bound = (3.0 / out.rows as f64).sqrt();
            fill(&mut out.data, bound);
        }
        w
    }

    /// `(name, values)` for every tensor in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), &self.tok_emb.data),
            ("pos_emb".into(), &self.pos_emb.data),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(l.parts()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        if let Some(o) = &self.out_w {
            out.push(("out_w".into(), &o.data));
        }
        out.push(("out_b".into(), &self.out_b));
        out
    }

    /// Mutable views in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for l in &mut self.layers {
            out.extend(l.parts_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        if let Some(o) = &mut self.out_w {
            out.push(&mut o.data);
        }
        out.push(&mut self.out_b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

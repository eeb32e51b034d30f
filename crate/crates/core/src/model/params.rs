use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

/// Single-layer LSTM; gate rows are stacked in input/forget/cell/output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }
}

/// Every trainable tensor of the network. The same struct doubles as the
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Input embeddings shared by encoder and decoder, `v x d_emb`.
    pub embedding: Array2<f64>,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    /// Attention projection over `[h_enc; h_dec]`, `h_dim x 2h_dim`.
    pub attn_proj: Array2<f64>,
    /// Attention scoring vector, `h_dim`.
    pub attn_score: Array1<f64>,
    /// Vocabulary projection over `[h_dec; context]`, `v x 2h_dim`.
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    /// Sentient gate weights over `[emb_q + emb_d; kg_sim; s_prev]`.
    pub gate_w: Array1<f64>,
    pub gate_b: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(vocab: usize, d_emb: usize, h_dim: usize, k_max: usize) -> Self {
        ModelParams {
            embedding: Array2::zeros((vocab, d_emb)),
            encoder: LstmParams::zeros(d_emb, h_dim),
            decoder: LstmParams::zeros(d_emb, h_dim),
            attn_proj: Array2::zeros((h_dim, 2 * h_dim)),
            attn_score: Array1::zeros(h_dim),
            out_w: Array2::zeros((vocab, 2 * h_dim)),
            out_b: Array1::zeros(vocab),
            gate_w: Array1::zeros(d_emb + k_max + 1),
            gate_b: Array1::zeros(1),
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor except the
    /// embedding, which is copied from `embedding`.
    pub fn init(embedding: Array2<f64>, h_dim: usize, k_max: usize, seed: u64) -> Self {
        let (vocab, d_emb) = embedding.dim();
        let mut p = Self::zeros(vocab, d_emb, h_dim, k_max);
        p.embedding = embedding;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in data {
                *x = rng.random_range(-bound..bound);
            }
        };
        for lstm in [&mut p.encoder, &mut p.decoder] {
            fill(lstm.w_x.as_slice_mut().unwrap(), h_dim);
            fill(lstm.w_h.as_slice_mut().unwrap(), h_dim);
            fill(lstm.b.as_slice_mut().unwrap(), h_dim);
        }
        fill(p.attn_proj.as_slice_mut().unwrap(), 2 * h_dim);
        fill(p.attn_score.as_slice_mut().unwrap(), h_dim);
        fill(p.out_w.as_slice_mut().unwrap(), 2 * h_dim);
        fill(p.out_b.as_slice_mut().unwrap(), 2 * h_dim);
        let gate_in = p.gate_w.len();
        fill(p.gate_w.as_slice_mut().unwrap(), gate_in);
        p
    }

    pub fn zeros_like(&self) -> Self {
        let (vocab, d_emb) = self.embedding.dim();
        let h_dim = self.encoder.hidden();
        let k_max = self.gate_w.len() - d_emb - 1;
        Self::zeros(vocab, d_emb, h_dim, k_max)
    }

    /// Named tensors as flat slices, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        use ParamGroup::*;
        vec![
            ("embedding", Encoder, self.embedding.as_slice().unwrap()),
            ("encoder.w_x", Encoder, self.encoder.w_x.as_slice().unwrap()),
            ("encoder.w_h", Encoder, self.encoder.w_h.as_slice().unwrap()),
            ("encoder.b", Encoder, self.encoder.b.as_slice().unwrap()),
            ("decoder.w_x", Decoder, self.decoder.w_x.as_slice().unwrap()),
            ("decoder.w_h", Decoder, self.decoder.w_h.as_slice().unwrap()),
            ("decoder.b", Decoder, self.decoder.b.as_slice().unwrap()),
            ("attn_proj", Decoder, self.attn_proj.as_slice().unwrap()),
            ("attn_score", Decoder, self.attn_score.as_slice().unwrap()),
            ("out_w", Decoder, self.out_w.as_slice().unwrap()),
            ("out_b", Decoder, self.out_b.as_slice().unwrap()),
            ("gate_w", Decoder, self.gate_w.as_slice().unwrap()),
            ("gate_b", Decoder, self.gate_b.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        use ParamGroup::*;
        vec![
            ("embedding", Encoder, self.embedding.as_slice_mut().unwrap()),
            ("encoder.w_x", Encoder, self.encoder.w_x.as_slice_mut().unwrap()),
            ("encoder.w_h", Encoder, self.encoder.w_h.as_slice_mut().unwrap()),
            ("encoder.b", Encoder, self.encoder.b.as_slice_mut().unwrap()),
            ("decoder.w_x", Decoder, self.decoder.w_x.as_slice_mut().unwrap()),
            ("decoder.w_h", Decoder, self.decoder.w_h.as_slice_mut().unwrap()),
            ("decoder.b", Decoder, self.decoder.b.as_slice_mut().unwrap()),
            ("attn_proj", Decoder, self.attn_proj.as_slice_mut().unwrap()),
            ("attn_score", Decoder, self.attn_score.as_slice_mut().unwrap()),
            ("out_w", Decoder, self.out_w.as_slice_mut().unwrap()),
            ("out_b", Decoder, self.out_b.as_slice_mut().unwrap()),
            ("gate_w", Decoder, self.gate_w.as_slice_mut().unwrap()),
            ("gate_b", Decoder, self.gate_b.as_slice_mut().unwrap()),
        ]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

//! The KG-copy network.
//!
//! An LSTM encoder reads the dialogue context; an attention LSTM decoder
//! produces vocabulary logits. At every step a scalar sentient gate
//! `s_t = sigmoid(W_sent [emb_q + emb_d; kg_sim; s_{t-1}])` splits the
//! probability mass between the vocabulary softmax and a softmax over the
//! tanh-cosine similarities of the query to each local triple:
//!
//! ```text
//! mixed = [ (1 - s_t) * softmax(o_t) ; s_t * softmax(kg_sim[..k]) ; 0 .. ]
//! ```
//!
//! `mixed` has `v + k_max` entries; entry `v + j` means "copy the object of
//! triple j".

pub mod lstm;
pub mod math;
pub mod params;
mod sequence;

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::linking::OutputToken;
use crate::corpus::vocab::{Vocabulary, EOS, SOS};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg::{embed_triples, LocalKg, TripleEmbeddingMatrix};
use crate::text::tokenize;
use math::{cosine, sigmoid, softmax};

pub use params::{LstmParams, ModelParams, ParamGroup};
pub use sequence::{SequenceExample, SequenceStats};

/// Probability floor inside every logarithm of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub h_dim: usize,
    pub d_emb: usize,
    /// Largest local graph the gate input can hold.
    pub k_max: usize,
    pub dropout_rnn: f64,
    pub dropout_emb: f64,
    /// Use the literal `s * kg_sim + (1 - s) * o` scores, softmaxed jointly,
    /// instead of the two-component mixture.
    #[serde(default)]
    pub raw_mixture: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h_dim: 64,
            d_emb: crate::embeddings::DEFAULT_DIM,
            k_max: 256,
            dropout_rnn: 0.3,
            dropout_emb: 0.4,
            raw_mixture: false,
        }
    }
}

/// Gate-side view of one team graph.
#[derive(Debug, Clone)]
pub struct KgFeatures {
    pub triple_emb: TripleEmbeddingMatrix,
    /// Vocabulary id fed back to the decoder after copying triple j
    /// (first token of its object label).
    pub feed_ids: Vec<u32>,
    /// Frozen vector of that first token, used as `emb_d`.
    pub feed_emb: Array2<f64>,
}

impl KgFeatures {
    pub fn new(kg: &LocalKg, table: &EmbeddingTable, vocab: &Vocabulary, k_max: usize) -> Result<Self> {
        if kg.k() > k_max {
            return Err(Error::KgTooLarge {
                team: kg.team_id.clone(),
                k: kg.k(),
                k_max,
            });
        }
        let mut feed_ids = Vec::with_capacity(kg.k());
        let mut feed_emb = Array2::zeros((kg.k(), table.dim()));
        for (j, triple) in kg.triples().iter().enumerate() {
            let first = tokenize(&triple.object).into_iter().next().unwrap_or_default();
            feed_ids.push(vocab.id(&first));
            feed_emb.row_mut(j).assign(&table.vector(&first));
        }
        Ok(KgFeatures {
            triple_emb: embed_triples(kg, table),
            feed_ids,
            feed_emb,
        })
    }

    /// No graph: every step generates from the vocabulary.
    pub fn empty(dim: usize) -> Self {
        let kg = LocalKg::from_triples("none", []);
        KgFeatures {
            triple_emb: embed_triples(&kg, &EmbeddingTable::from_vectors(dim, [], None)),
            feed_ids: Vec::new(),
            feed_emb: Array2::zeros((0, dim)),
        }
    }

    pub fn k(&self) -> usize {
        self.feed_ids.len()
    }
}

/// Per-query gate inputs, fixed over the decoding steps of one response.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInputs {
    /// emb_q
    pub query: Array1<f64>,
    /// tanh-cosine per triple, zero-padded to `k_max`.
    pub kg_sim: Array1<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    /// h_1..h_T
    pub outputs: Array2<f64>,
    pub last_h: Array1<f64>,
    pub last_c: Array1<f64>,
    /// Encoder half of the attention projection applied to each h_t.
    projected: Array2<f64>,
}

impl EncoderState {
    /// The summary vector `c`: the last hidden state.
    pub fn context(&self) -> ArrayView1<'_, f64> {
        self.last_h.view()
    }

    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepOutput {
    /// o_t, length v
    pub vocab_logits: Array1<f64>,
    /// kg_sim, length k_max, `-inf` beyond k
    pub kg_scores: Array1<f64>,
    /// s_t
    pub gate: f64,
    /// out_t over the extended space, length v + k_max
    pub mixed: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vocab: f64,
    pub sentient: f64,
}

impl LossBreakdown {
    pub fn new(vocab: f64, sentient: f64) -> Self {
        LossBreakdown {
            total: vocab + sentient,
            vocab,
            sentient,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<OutputToken>,
    /// s_t at every executed step, including the one that emitted EOS.
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgCopyModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Frozen pretrained vector per vocabulary id, the source of `emb_d`.
    gate_vocab: Array2<f64>,
}

impl KgCopyModel {
    /// Fresh model whose embedding layer is initialized from `table`.
    pub fn new(config: ModelConfig, vocab: &Vocabulary, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        if table.dim() != config.d_emb {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, model expects {}",
                table.dim(),
                config.d_emb
            )));
        }
        let gate_vocab = table.vocab_matrix(vocab);
        let params = ModelParams::init(gate_vocab.clone(), config.h_dim, config.k_max, seed);
        Ok(KgCopyModel {
            config,
            params,
            gate_vocab,
        })
    }

    /// Assembles a model from explicit parts; shapes must agree.
    pub fn from_parts(config: ModelConfig, params: ModelParams, gate_vocab: Array2<f64>) -> Self {
        assert_eq!(params.embedding.dim(), gate_vocab.dim(), "gate table shape");
        assert_eq!(params.gate_w.len(), config.d_emb + config.k_max + 1, "gate width");
        assert_eq!(params.encoder.hidden(), config.h_dim, "hidden size");
        KgCopyModel {
            config,
            params,
            gate_vocab,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.params.embedding.nrows()
    }

    pub fn gate_inputs(&self, query: ArrayView1<'_, f64>, kg: &KgFeatures) -> GateInputs {
        let mut kg_sim = Array1::zeros(self.config.k_max);
        for i in 0..kg.k() {
            kg_sim[i] = cosine(query, kg.triple_emb.row(i)).tanh();
        }
        GateInputs {
            query: query.to_owned(),
            kg_sim,
            k: kg.k(),
        }
    }

    /// Embedding-layer id and frozen gate vector for a decoder input token.
    fn input_of<'a>(&'a self, token: OutputToken, kg: &'a KgFeatures) -> (u32, ArrayView1<'a, f64>) {
        match token {
            OutputToken::Word(id) => (id, self.gate_vocab.row(id as usize)),
            OutputToken::Copy(j) => (kg.feed_ids[j], kg.feed_emb.row(j)),
        }
    }

    /// Eval-mode encoder pass.
    pub fn encode(&self, context_ids: &[u32]) -> EncoderState {
        assert!(!context_ids.is_empty(), "encoder input must be non-empty");
        let h = self.config.h_dim;
        let inputs = self.gather(context_ids);
        let zeros = Array1::zeros(h);
        let trace = lstm::forward(&self.params.encoder, inputs, zeros.view(), zeros.view());
        let projected = trace.h.dot(&self.params.attn_proj.slice(s![.., ..h]).t());
        EncoderState {
            last_h: trace.last_h(),
            last_c: trace.last_c(),
            outputs: trace.h,
            projected,
        }
    }

    fn gather(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.config.d_emb));
        for (row, &id) in ids.iter().enumerate() {
            out.row_mut(row).assign(&self.params.embedding.row(id as usize));
        }
        out
    }

    /// Attention weights over the encoder states and the weighted context.
    pub fn attend(&self, enc: &EncoderState, h_dec: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let h = self.config.h_dim;
        let query = self.params.attn_proj.slice(s![.., h..]).dot(&h_dec);
        let scores: Array1<f64> = enc
            .projected
            .rows()
            .into_iter()
            .map(|row| (&row + &query).mapv(f64::tanh).dot(&self.params.attn_score))
            .collect();
        let alpha = softmax(scores.view());
        let context = alpha.dot(&enc.outputs);
        (alpha, context)
    }

    pub fn initial_state(&self, enc: &EncoderState) -> DecoderState {
        DecoderState {
            h: enc.last_h.clone(),
            c: enc.last_c.clone(),
        }
    }

    /// One eval-mode decoder step fed with `prev` (SOS at the first step).
    pub fn decode_step(
        &self,
        prev: OutputToken,
        state: &DecoderState,
        enc: &EncoderState,
        gate: &GateInputs,
        kg: &KgFeatures,
        s_prev: f64,
    ) -> (DecodeStepOutput, DecoderState) {
        let h = self.config.h_dim;
        let d = self.config.d_emb;
        let k_max = self.config.k_max;
        let (id, gate_emb) = self.input_of(prev, kg);
        let (h_dec, c_dec) = lstm::step(
            &self.params.decoder,
            self.params.embedding.row(id as usize),
            state.h.view(),
            state.c.view(),
        );
        let (_, context) = self.attend(enc, h_dec.view());
        let out_w = &self.params.out_w;
        let vocab_logits = out_w.slice(s![.., ..h]).dot(&h_dec) + out_w.slice(s![.., h..]).dot(&context) + &self.params.out_b;

        let w = &self.params.gate_w;
        let z = w.slice(s![..d]).dot(&(&gate.query + &gate_emb))
            + w.slice(s![d..d + k_max]).dot(&gate.kg_sim)
            + w[d + k_max] * s_prev
            + self.params.gate_b[0];
        let gate_value = sigmoid(z);
        let mixed = self.mix(vocab_logits.view(), gate, gate_value);
        let kg_scores = Array1::from_shape_fn(k_max, |i| if i < gate.k { gate.kg_sim[i] } else { f64::NEG_INFINITY });
        (
            DecodeStepOutput {
                vocab_logits,
                kg_scores,
                gate: gate_value,
                mixed,
            },
            DecoderState { h: h_dec, c: c_dec },
        )
    }

    /// Combines vocabulary logits and graph similarities under gate value `s`.
    pub fn mix(&self, logits: ArrayView1<'_, f64>, gate: &GateInputs, s: f64) -> Array1<f64> {
        let v = logits.len();
        let k = gate.k;
        let mut mixed = Array1::zeros(v + self.config.k_max);
        let kg_sim = gate.kg_sim.slice(s![..k]);
        if self.config.raw_mixture {
            let mut scores = Array1::zeros(v + k);
            scores.slice_mut(s![..v]).assign(&(&logits * (1.0 - s)));
            scores.slice_mut(s![v..]).assign(&(&kg_sim * s));
            mixed.slice_mut(s![..v + k]).assign(&softmax(scores.view()));
        } else if k == 0 {
            mixed.slice_mut(s![..v]).assign(&softmax(logits));
        } else {
            mixed.slice_mut(s![..v]).assign(&(softmax(logits) * (1.0 - s)));
            mixed.slice_mut(s![v..v + k]).assign(&(softmax(kg_sim) * s));
        }
        mixed
    }

    /// Greedy inference: feeds back the argmax of `mixed` until EOS or `max_len` steps.
    pub fn greedy_decode(&self, context_ids: &[u32], gate: &GateInputs, kg: &KgFeatures, max_len: usize) -> Decoded {
        let enc = self.encode(context_ids);
        let mut state = self.initial_state(&enc);
        let mut prev = OutputToken::Word(SOS);
        let mut s_prev = 0.0;
        let v = self.vocab_size();
        let mut tokens = Vec::new();
        let mut gates = Vec::new();
        for _ in 0..max_len.max(1) {
            let (out, next) = self.decode_step(prev, &state, &enc, gate, kg, s_prev);
            gates.push(out.gate);
            let best = argmax(out.mixed.slice(s![..v + gate.k]));
            let token = OutputToken::from_extended(best, v);
            if token == OutputToken::Word(EOS) {
                break;
            }
            tokens.push(token);
            prev = token;
            s_prev = out.gate;
            state = next;
        }
        Decoded { tokens, gates }
    }
}

pub(crate) fn argmax(xs: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the targets under `mixed`, mean binary
/// cross-entropy of the gates against the sentient labels, and their sum.
pub fn loss(outputs: &[DecodeStepOutput], targets: &[OutputToken], labels: &[u8], vocab_size: usize) -> LossBreakdown {
    assert_eq!(outputs.len(), targets.len(), "one output per target");
    assert_eq!(targets.len(), labels.len(), "one label per target");
    if outputs.is_empty() {
        return LossBreakdown::default();
    }
    let n = outputs.len() as f64;
    let mut vocab = 0.0;
    let mut sentient = 0.0;
    for ((out, &target), &label) in outputs.iter().zip(targets).zip(labels) {
        vocab -= out.mixed[target.extended_id(vocab_size)].max(PROB_FLOOR).ln();
        let p = if label == 1 { out.gate } else { 1.0 - out.gate };
        sentient -= p.max(PROB_FLOOR).ln();
    }
    LossBreakdown::new(vocab / n, sentient / n)
}

#[cfg(test)]
mod tests;

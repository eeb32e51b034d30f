//! Teacher-forced forward and backward pass over one example.
//!
//! The decoder LSTM does not consume the attention context, so the whole
//! target sequence can be run through the recurrence first and attention,
//! output projection and gate evaluated afterwards as dense matrix products.

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::math::{log_softmax, sigmoid, softmax, softplus};
use super::{argmax, lstm, GateInputs, KgCopyModel, KgFeatures, ModelParams, PROB_FLOOR};
use crate::corpus::linking::OutputToken;
use crate::corpus::vocab::SOS;

/// Borrowed view of one supervised example.
#[derive(Debug, Clone, Copy)]
pub struct SequenceExample<'a> {
    pub context_ids: &'a [u32],
    pub targets: &'a [OutputToken],
    pub labels: &'a [u8],
    pub gate: &'a GateInputs,
    pub kg: &'a KgFeatures,
}

/// Loss sums and accuracy counts over the steps of one or more examples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SequenceStats {
    pub vocab_loss: f64,
    pub sentient_loss: f64,
    pub steps: usize,
    pub correct_tokens: usize,
    pub correct_labels: usize,
}

impl SequenceStats {
    pub fn add(&mut self, other: &SequenceStats) {
        self.vocab_loss += other.vocab_loss;
        self.sentient_loss += other.sentient_loss;
        self.steps += other.steps;
        self.correct_tokens += other.correct_tokens;
        self.correct_labels += other.correct_labels;
    }

    pub fn token_accuracy(&self) -> f64 {
        ratio(self.correct_tokens, self.steps)
    }

    pub fn label_accuracy(&self) -> f64 {
        ratio(self.correct_labels, self.steps)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

fn apply(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

impl KgCopyModel {
    /// Teacher-forced pass. Returns loss sums over the target steps; when
    /// `grads` is given, adds `weight` times the gradient of the summed loss.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward_backward(
        &self,
        ex: SequenceExample<'_>,
        weight: f64,
        grads: Option<&mut ModelParams>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> SequenceStats {
        let cfg = &self.config;
        let p = &self.params;
        let (h, d, k_max) = (cfg.h_dim, cfg.d_emb, cfg.k_max);
        let v = self.vocab_size();
        let k = ex.gate.k;
        let enc_len = ex.context_ids.len();
        let dec_len = ex.targets.len();
        assert!(enc_len > 0 && dec_len > 0, "empty sequence");
        assert_eq!(ex.labels.len(), dec_len, "one label per target");

        // encoder
        let mut x_enc = self.gather(ex.context_ids);
        let m_x_enc = dropout_mask(enc_len, d, cfg.dropout_emb, dropout_rng.as_deref_mut());
        apply(&mut x_enc, &m_x_enc);
        let zeros = Array1::zeros(h);
        let enc = lstm::forward(&p.encoder, x_enc, zeros.view(), zeros.view());
        let m_h_enc = dropout_mask(enc_len, h, cfg.dropout_rnn, dropout_rng.as_deref_mut());
        let mut h_enc = enc.h.clone();
        apply(&mut h_enc, &m_h_enc);

        // decoder inputs: SOS then the targets shifted right
        let mut dec_ids = Vec::with_capacity(dec_len);
        let mut gate_feat = Array2::<f64>::zeros((dec_len, d));
        for t in 0..dec_len {
            let prev = if t == 0 { OutputToken::Word(SOS) } else { ex.targets[t - 1] };
            let (id, gate_emb) = self.input_of(prev, ex.kg);
            dec_ids.push(id);
            gate_feat.row_mut(t).assign(&(&ex.gate.query + &gate_emb));
        }
        let mut x_dec = self.gather(&dec_ids);
        let m_x_dec = dropout_mask(dec_len, d, cfg.dropout_emb, dropout_rng.as_deref_mut());
        apply(&mut x_dec, &m_x_dec);
        let dec = lstm::forward(&p.decoder, x_dec, enc.h.row(enc_len - 1), enc.c.row(enc_len - 1));
        let m_h_dec = dropout_mask(dec_len, h, cfg.dropout_rnn, dropout_rng);
        let mut h_dec = dec.h.clone();
        apply(&mut h_dec, &m_h_dec);

        // attention
        let w_enc = p.attn_proj.slice(s![.., ..h]);
        let w_dec = p.attn_proj.slice(s![.., h..]);
        let proj_enc = h_enc.dot(&w_enc.t());
        let proj_dec = h_dec.dot(&w_dec.t());
        let mut act = Array3::<f64>::zeros((dec_len, enc_len, h));
        let mut alpha = Array2::<f64>::zeros((dec_len, enc_len));
        for t in 0..dec_len {
            let mut scores = Array1::zeros(enc_len);
            for i in 0..enc_len {
                let mut u = act.slice_mut(s![t, i, ..]);
                Zip::from(&mut u)
                    .and(proj_enc.row(i))
                    .and(proj_dec.row(t))
                    .for_each(|u, &a, &b| *u = (a + b).tanh());
                scores[i] = u.dot(&p.attn_score);
            }
            alpha.row_mut(t).assign(&softmax(scores.view()));
        }
        let ctx = alpha.dot(&h_enc);

        // vocabulary logits
        let mut features = Array2::<f64>::zeros((dec_len, 2 * h));
        features.slice_mut(s![.., ..h]).assign(&h_dec);
        features.slice_mut(s![.., h..]).assign(&ctx);
        let logits = features.dot(&p.out_w.t()) + &p.out_b;

        // sentient gate recurrence
        let w_emb = p.gate_w.slice(s![..d]);
        let w_kg = p.gate_w.slice(s![d..d + k_max]);
        let w_prev = p.gate_w[d + k_max];
        let kg_term = w_kg.dot(&ex.gate.kg_sim) + p.gate_b[0];
        let mut z = Array1::<f64>::zeros(dec_len);
        let mut gate = Array1::<f64>::zeros(dec_len);
        let mut s_prev = 0.0;
        for t in 0..dec_len {
            z[t] = w_emb.dot(&gate_feat.row(t)) + kg_term + w_prev * s_prev;
            gate[t] = sigmoid(z[t]);
            s_prev = gate[t];
        }

        // losses and local gradients
        let kg_sim = ex.gate.kg_sim.slice(s![..k]);
        let kg_log = if k > 0 { log_softmax(kg_sim) } else { Array1::zeros(0) };
        let log_floor = PROB_FLOOR.ln();
        let mut stats = SequenceStats {
            steps: dec_len,
            ..Default::default()
        };
        let mut d_logits = Array2::<f64>::zeros((dec_len, v));
        let mut dz = Array1::<f64>::zeros(dec_len);
        for t in 0..dec_len {
            let target = ex.targets[t];
            let label = ex.labels[t];
            let st = gate[t];
            let row = logits.row(t);

            let mixed = self.mix(row, ex.gate, st);
            if argmax(mixed.slice(s![..v + k])) == target.extended_id(v) {
                stats.correct_tokens += 1;
            }
            if (st > 0.5) == (label == 1) {
                stats.correct_labels += 1;
            }

            if cfg.raw_mixture {
                let mut scores = Array1::zeros(v + k);
                scores.slice_mut(s![..v]).assign(&(&row * (1.0 - st)));
                scores.slice_mut(s![v..]).assign(&(&kg_sim * st));
                let log_p = log_softmax(scores.view());
                let idx = target.extended_id(v);
                if log_p[idx] >= log_floor {
                    stats.vocab_loss -= log_p[idx];
                    let mut dr = log_p.mapv(f64::exp);
                    dr[idx] -= 1.0;
                    d_logits.row_mut(t).assign(&(&dr.slice(s![..v]) * (1.0 - st)));
                    let ds = -dr.slice(s![..v]).dot(&row) + dr.slice(s![v..]).dot(&kg_sim);
                    dz[t] += ds * st * (1.0 - st);
                } else {
                    stats.vocab_loss -= log_floor;
                }
            } else {
                match target {
                    OutputToken::Word(w) => {
                        let lsm = log_softmax(row);
                        // ln(1 - s) = -softplus(z); without a graph all mass is on the vocabulary
                        let gate_log = if k > 0 { -softplus(z[t]) } else { 0.0 };
                        let log_p = gate_log + lsm[w as usize];
                        if log_p >= log_floor {
                            stats.vocab_loss -= log_p;
                            let mut dl = lsm.mapv(f64::exp);
                            dl[w as usize] -= 1.0;
                            d_logits.row_mut(t).assign(&dl);
                            if k > 0 {
                                dz[t] += st;
                            }
                        } else {
                            stats.vocab_loss -= log_floor;
                        }
                    }
                    OutputToken::Copy(j) => {
                        assert!(j < k, "copy target {j} outside a graph of {k} triples");
                        let log_p = -softplus(-z[t]) + kg_log[j];
                        if log_p >= log_floor {
                            stats.vocab_loss -= log_p;
                            dz[t] -= 1.0 - st;
                        } else {
                            stats.vocab_loss -= log_floor;
                        }
                    }
                }
            }

            // binary cross-entropy on the gate
            let bce = if label == 1 { softplus(-z[t]) } else { softplus(z[t]) };
            if -bce >= log_floor {
                stats.sentient_loss += bce;
                dz[t] += st - f64::from(label);
            } else {
                stats.sentient_loss -= log_floor;
            }
        }

        let Some(g) = grads else {
            return stats;
        };
        d_logits *= weight;
        dz *= weight;

        // gate backward, newest step first: s_t feeds z_{t+1}
        let mut ds_carry = 0.0;
        let mut d_gate_feat = Array1::<f64>::zeros(d);
        let mut d_z_sum = 0.0;
        for t in (0..dec_len).rev() {
            let st = gate[t];
            let dzt = dz[t] + ds_carry * st * (1.0 - st);
            d_gate_feat.scaled_add(dzt, &gate_feat.row(t));
            d_z_sum += dzt;
            let s_before = if t == 0 { 0.0 } else { gate[t - 1] };
            g.gate_w[d + k_max] += dzt * s_before;
            ds_carry = dzt * w_prev;
        }
        g.gate_w.slice_mut(s![..d]).scaled_add(1.0, &d_gate_feat);
        g.gate_w.slice_mut(s![d..d + k_max]).scaled_add(d_z_sum, &ex.gate.kg_sim);
        g.gate_b[0] += d_z_sum;

        // output projection
        g.out_w += &d_logits.t().dot(&features);
        g.out_b += &d_logits.sum_axis(Axis(0));
        let d_features = d_logits.dot(&p.out_w);
        let mut d_h_dec = d_features.slice(s![.., ..h]).to_owned();
        let d_ctx = d_features.slice(s![.., h..]);

        // attention
        let mut d_h_enc = alpha.t().dot(&d_ctx);
        let d_alpha = d_ctx.dot(&h_enc.t());
        let mut d_proj_enc = Array2::<f64>::zeros((enc_len, h));
        let mut d_proj_dec = Array2::<f64>::zeros((dec_len, h));
        let mut d_score_vec = Array1::<f64>::zeros(h);
        for t in 0..dec_len {
            let a = alpha.row(t);
            let da = d_alpha.row(t);
            let mean = a.dot(&da);
            for i in 0..enc_len {
                let d_score = a[i] * (da[i] - mean);
                if d_score == 0.0 {
                    continue;
                }
                let u = act.slice(s![t, i, ..]);
                d_score_vec.scaled_add(d_score, &u);
                let d_pre: Array1<f64> = Zip::from(&u)
                    .and(&p.attn_score)
                    .map_collect(|&u, &w| d_score * w * (1.0 - u * u));
                d_proj_enc.row_mut(i).scaled_add(1.0, &d_pre);
                d_proj_dec.row_mut(t).scaled_add(1.0, &d_pre);
            }
        }
        g.attn_score += &d_score_vec;
        g.attn_proj.slice_mut(s![.., ..h]).scaled_add(1.0, &d_proj_enc.t().dot(&h_enc));
        g.attn_proj.slice_mut(s![.., h..]).scaled_add(1.0, &d_proj_dec.t().dot(&h_dec));
        d_h_enc += &d_proj_enc.dot(&w_enc);
        d_h_dec += &d_proj_dec.dot(&w_dec);

        // decoder recurrence
        apply(&mut d_h_dec, &m_h_dec);
        let (mut d_x_dec, d_h0, d_c0) =
            lstm::backward(&p.decoder, &dec, d_h_dec.view(), zeros.view(), zeros.view(), &mut g.decoder);
        apply(&mut d_x_dec, &m_x_dec);
        scatter_rows(&mut g.embedding, &dec_ids, &d_x_dec);

        // encoder recurrence; the decoder's initial state is the encoder's final state
        apply(&mut d_h_enc, &m_h_enc);
        let (mut d_x_enc, _, _) = lstm::backward(&p.encoder, &enc, d_h_enc.view(), d_h0.view(), d_c0.view(), &mut g.encoder);
        apply(&mut d_x_enc, &m_x_enc);
        scatter_rows(&mut g.embedding, ex.context_ids, &d_x_enc);

        stats
    }
}

fn scatter_rows(target: &mut Array2<f64>, ids: &[u32], rows: &Array2<f64>) {
    for (r, &id) in ids.iter().enumerate() {
        target.row_mut(id as usize).scaled_add(1.0, &rows.row(r));
    }
}

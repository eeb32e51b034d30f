//! Teacher-forced multi-task training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::linking::{LinkConfig, OutputToken, TrainingExample};
use crate::corpus::vocab::PAD;
use crate::corpus::{Dialogue, Vocabulary};
use crate::embeddings::{EmbeddingTable, LexiconTagger};
use crate::error::{Error, Result};
use crate::evaluation::{score_responses, EvalReport};
use crate::kg::LocalKg;
use crate::model::{KgCopyModel, ModelConfig, ModelParams, ParamGroup, SequenceExample, SequenceStats};
use crate::pipeline::{decode_all, prepare, KgBank, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    EntityF1,
    Bleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Encoder and embedding layer.
    pub lr_encoder: f64,
    /// Decoder, attention, output projection and gate.
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout_rnn: f64,
    pub dropout_emb: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub select_by: Selection,
    pub max_decode_len: usize,
    pub h_dim: usize,
    pub k_max: usize,
    pub raw_mixture: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            lr_encoder: 1e-3,
            lr_decoder: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rnn: 0.3,
            dropout_emb: 0.4,
            grad_clip_norm: 5.0,
            seed: 42,
            select_by: Selection::EntityF1,
            max_decode_len: 40,
            h_dim: 64,
            k_max: 256,
            raw_mixture: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr_encoder > 0.0 && self.lr_decoder > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rnn) || !(0.0..1.0).contains(&self.dropout_emb) {
            return bad("dropout rates must be in [0, 1)");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive");
        }
        if self.h_dim == 0 || self.k_max == 0 || self.max_decode_len == 0 {
            return bad("h_dim, k_max and max_decode_len must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, d_emb: usize) -> ModelConfig {
        ModelConfig {
            h_dim: self.h_dim,
            d_emb,
            k_max: self.k_max,
            dropout_rnn: self.dropout_rnn,
            dropout_emb: self.dropout_emb,
            raw_mixture: self.raw_mixture,
        }
    }
}

/// A padded mini-batch. Row `r` holds example `indices[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub context: Array2<u32>,
    pub context_mask: Array2<bool>,
    pub targets: Array2<OutputToken>,
    pub labels: Array2<u8>,
    pub target_mask: Array2<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pad_count(&self) -> usize {
        self.context_mask.iter().chain(self.target_mask.iter()).filter(|m| !**m).count()
    }

    /// The unpadded sequences of row `r`.
    pub fn row(&self, r: usize) -> (Vec<u32>, Vec<OutputToken>, Vec<u8>) {
        let clen = self.context_mask.row(r).iter().filter(|m| **m).count();
        let tlen = self.target_mask.row(r).iter().filter(|m| **m).count();
        (
            self.context.row(r).iter().take(clen).copied().collect(),
            self.targets.row(r).iter().take(tlen).copied().collect(),
            self.labels.row(r).iter().take(tlen).copied().collect(),
        )
    }

    fn pack(examples: &[TrainingExample], indices: Vec<usize>) -> Batch {
        let rows = indices.len();
        let max_c = indices.iter().map(|&i| examples[i].context_ids.len()).max().unwrap_or(0);
        let max_t = indices.iter().map(|&i| examples[i].targets.len()).max().unwrap_or(0);
        let mut b = Batch {
            context: Array2::from_elem((rows, max_c), PAD),
            context_mask: Array2::from_elem((rows, max_c), false),
            targets: Array2::from_elem((rows, max_t), OutputToken::Word(PAD)),
            labels: Array2::zeros((rows, max_t)),
            target_mask: Array2::from_elem((rows, max_t), false),
            indices,
        };
        for (r, &i) in b.indices.iter().enumerate() {
            let ex = &examples[i];
            for (t, &id) in ex.context_ids.iter().enumerate() {
                b.context[[r, t]] = id;
                b.context_mask[[r, t]] = true;
            }
            for (t, (&tok, &lab)) in ex.targets.iter().zip(&ex.sentient_labels).enumerate() {
                b.targets[[r, t]] = tok;
                b.labels[[r, t]] = lab;
                b.target_mask[[r, t]] = true;
            }
        }
        b
    }
}

/// Length-bucketed batches. Examples are shuffled, stably sorted by
/// (context, target) length and cut into runs of `batch_size`; the full
/// batches are then shuffled and the short remainder, if any, goes last.
pub fn make_batches(examples: &[TrainingExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].context_ids.len(), examples[i].targets.len()));
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let tail = match groups.last() {
        Some(g) if g.len() < batch_size => groups.pop(),
        _ => None,
    };
    groups.shuffle(&mut rng);
    groups.extend(tail);
    Ok(groups.into_iter().map(|g| Batch::pack(examples, g)).collect())
}

/// Unbucketed batches in shuffled order; the baseline for padding counts.
pub fn make_random_batches(examples: &[TrainingExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|g| Batch::pack(examples, g.to_vec())).collect())
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(config: &TrainConfig, like: &ModelParams) -> Self {
        Adam {
            lr_encoder: config.lr_encoder,
            lr_decoder: config.lr_decoder,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, group, p), (_, _, g)), (_, _, m)), (_, _, v)) in
            params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
        {
            let lr = match group {
                ParamGroup::Encoder => self.lr_encoder,
                ParamGroup::Decoder => self.lr_decoder,
            };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so its global norm is at most `max_norm`. Returns the
/// norms before and after.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
        (norm, grads.global_norm())
    } else {
        (norm, norm)
    }
}

/// Losses of one optimizer step, averaged over its target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub examples: usize,
    pub steps: usize,
    pub loss: f64,
    pub loss_vocab: f64,
    pub loss_sentient: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_vocab: f64,
    pub loss_sentient: f64,
    pub token_accuracy: f64,
    pub label_accuracy: f64,
    pub valid_bleu: f64,
    pub valid_entity_f1: f64,
    pub improved: bool,
}

impl EpochRecord {
    pub fn csv_header() -> &'static str {
        "epoch,train_loss,L_vocab,L_sentient,valid_bleu,valid_entity_f1"
    }

    pub fn to_csv(&self) -> String {
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{:.6},{:.6},{:.6},{:.4},{:.4}",
            self.epoch, self.train_loss, self.loss_vocab, self.loss_sentient, self.valid_bleu, self.valid_entity_f1
        );
        line
    }
}

/// Parameters of the best epoch seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub params: ModelParams,
    pub valid_bleu: f64,
    pub valid_entity_f1: f64,
    pub report: EvalReport,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: KgCopyModel,
    optimizer: Adam,
    shuffle_seed: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    train: &'a Prepared,
    valid: &'a Prepared,
    bank: &'a KgBank,
    vocab: &'a Vocabulary,
    epoch: usize,
    best: Option<BestModel>,
    pub history: Vec<EpochRecord>,
    pub batch_log: Vec<BatchRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        model: KgCopyModel,
        train: &'a Prepared,
        valid: &'a Prepared,
        bank: &'a KgBank,
        vocab: &'a Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if valid.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        crate::pipeline::require_graphs(train)?;
        crate::pipeline::require_graphs(valid)?;
        let optimizer = Adam::new(&config, &model.params);
        Ok(Trainer {
            shuffle_seed: ChaCha8Rng::seed_from_u64(config.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d809),
            config,
            model,
            optimizer,
            train,
            valid,
            bank,
            vocab,
            epoch: 0,
            best: None,
            history: Vec::new(),
            batch_log: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<&BestModel> {
        self.best.as_ref()
    }

    fn sequence<'b>(&self, data: &'b Prepared, i: usize, context: &'b [u32], targets: &'b [OutputToken], labels: &'b [u8]) -> SequenceExample<'b>
    where
        'a: 'b,
    {
        SequenceExample {
            context_ids: context,
            targets,
            labels,
            gate: &data.gates[i],
            kg: self.bank.features(&data.examples[i].team_id),
        }
    }

    /// One pass over the training data followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.epoch += 1;
        let seed = rand::Rng::random::<u64>(&mut self.shuffle_seed);
        let batches = make_batches(&self.train.examples, self.config.batch_size, seed)?;
        let mut totals = SequenceStats::default();
        let mut grads = self.model.params.zeros_like();
        for (b, batch) in batches.iter().enumerate() {
            grads.fill_zero();
            let steps: usize = batch.target_mask.iter().filter(|m| **m).count();
            let weight = 1.0 / steps as f64;
            let mut stats = SequenceStats::default();
            for r in 0..batch.len() {
                let (context, targets, labels) = batch.row(r);
                let ex = self.sequence(self.train, batch.indices[r], &context, &targets, &labels);
                let s = self.model.forward_backward(ex, weight, Some(&mut grads), Some(&mut self.dropout_rng));
                stats.add(&s);
            }
            let loss_vocab = stats.vocab_loss / steps as f64;
            let loss_sentient = stats.sentient_loss / steps as f64;
            let loss = loss_vocab + loss_sentient;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                });
            }
            let (grad_norm, clipped_norm) = clip_gradients(&mut grads, self.config.grad_clip_norm);
            self.optimizer.step(&mut self.model.params, &grads);
            self.batch_log.push(BatchRecord {
                epoch: self.epoch,
                batch: b,
                examples: batch.len(),
                steps,
                loss,
                loss_vocab,
                loss_sentient,
                grad_norm,
                clipped_norm,
            });
            totals.add(&stats);
        }

        let report = self.validate()?;
        let n = totals.steps as f64;
        let score = |bleu: f64, f1: f64| match self.config.select_by {
            Selection::EntityF1 => f1,
            Selection::Bleu => bleu,
        };
        let improved = self
            .best
            .as_ref()
            .is_none_or(|b| score(report.bleu, report.entity_f1) > score(b.valid_bleu, b.valid_entity_f1));
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: (totals.vocab_loss + totals.sentient_loss) / n,
            loss_vocab: totals.vocab_loss / n,
            loss_sentient: totals.sentient_loss / n,
            token_accuracy: totals.token_accuracy(),
            label_accuracy: totals.label_accuracy(),
            valid_bleu: report.bleu,
            valid_entity_f1: report.entity_f1,
            improved,
        };
        if improved {
            self.best = Some(BestModel {
                epoch: self.epoch,
                params: self.model.params.clone(),
                valid_bleu: report.bleu,
                valid_entity_f1: report.entity_f1,
                report,
            });
        }
        log::info!("{}", record.to_csv());
        self.history.push(record.clone());
        Ok(record)
    }

    /// Greedy-decodes the validation split with the current parameters.
    pub fn validate(&self) -> Result<EvalReport> {
        let responses = decode_all(&self.model, self.valid, self.bank, self.vocab, self.config.max_decode_len);
        score_responses("valid", &responses, &self.bank.matchers())
    }

    /// Teacher-forced accuracy and loss without dropout.
    pub fn teacher_forced(&self, data: &Prepared) -> SequenceStats {
        let mut totals = SequenceStats::default();
        for (i, ex) in data.examples.iter().enumerate() {
            let seq = SequenceExample {
                context_ids: &ex.context_ids,
                targets: &ex.targets,
                labels: &ex.sentient_labels,
                gate: &data.gates[i],
                kg: self.bank.features(&ex.team_id),
            };
            totals.add(&self.model.forward_backward(seq, 1.0, None, None));
        }
        totals
    }

    /// Runs the remaining epochs and returns the best model.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            best: self.best.expect("at least one epoch has run"),
            last: self.model,
            history: self.history,
            batch_log: self.batch_log,
        }
    }
}

pub struct TrainOutcome {
    pub best: BestModel,
    /// Parameters after the final epoch.
    pub last: KgCopyModel,
    pub history: Vec<EpochRecord>,
    pub batch_log: Vec<BatchRecord>,
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub train: Prepared,
    pub valid: Prepared,
}

/// Builds the vocabulary from `train`, links both splits and trains.
/// `make_table` receives the vocabulary and the graph tokens it must also
/// cover, and returns the frozen embedding table.
pub fn train(
    config: &TrainConfig,
    link: &LinkConfig,
    train: &[Dialogue],
    valid: &[Dialogue],
    graphs: &BTreeMap<String, LocalKg>,
    make_table: impl FnOnce(&Vocabulary, &[String]) -> Result<EmbeddingTable>,
) -> Result<Trained> {
    config.validate()?;
    let vocab = Vocabulary::build(train, 1);
    let table = make_table(&vocab, &KgBank::graph_tokens(graphs))?;
    let model = KgCopyModel::new(config.model_config(table.dim()), &vocab, &table, config.seed)?;
    let bank = KgBank::new(graphs.clone(), &table, &vocab, config.k_max)?;
    let prep = |ds: &[Dialogue]| prepare(ds, &bank, &model, &vocab, &table, &LexiconTagger, link);
    let (train, valid) = (prep(train), prep(valid));
    let outcome = Trainer::new(config.clone(), model.clone(), &train, &valid, &bank, &vocab)?.run()?;
    let best = &outcome.best;
    let checkpoint = Checkpoint::new(
        config.clone(),
        &model,
        best.params.clone(),
        link.clone(),
        vocab,
        table,
        best.epoch,
        best.valid_bleu,
        best.valid_entity_f1,
    );
    Ok(Trained {
        checkpoint,
        outcome,
        train,
        valid,
    })
}

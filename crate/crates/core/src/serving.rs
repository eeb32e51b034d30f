//! Interactive chat over a frozen checkpoint.
//!
//! A [`ChatEngine`] is immutable once built and can be shared across threads;
//! all per-conversation state lives in [`ChatSession`], which the caller owns
//! and serializes access to.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{encode_context, LinkConfig, OutputToken, Vocabulary};
use crate::embeddings::{query_embedding, EmbeddingTable, LexiconTagger};
use crate::error::{Error, Result};
use crate::kg::LocalKg;
use crate::model::KgCopyModel;
use crate::pipeline::KgBank;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    Vocab,
    Kg,
}

/// A half-open range of characters (not bytes) of the response text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub source: SpanSource,
    /// Triple position for kg spans.
    pub triple: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub spans: Vec<Span>,
    pub gate_trace: Vec<f64>,
    /// The utterance was cut to the encoder's input limit.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatSession {
    pub id: String,
    pub team: String,
    history: VecDeque<String>,
    bound: usize,
}

impl ChatSession {
    pub fn history(&self) -> impl Iterator<Item = &str> {
        self.history.iter().map(String::as_str)
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    fn push(&mut self, utterance: String) {
        self.history.push_back(utterance);
        while self.history.len() > self.bound {
            self.history.pop_front();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatEngine {
    model: KgCopyModel,
    vocab: Vocabulary,
    table: EmbeddingTable,
    bank: KgBank,
    link: LinkConfig,
    pub max_len: usize,
    pub max_utterance_tokens: usize,
}

impl ChatEngine {
    pub fn new(checkpoint: Checkpoint, graphs: BTreeMap<String, LocalKg>) -> Result<Self> {
        let model = checkpoint.model();
        let bank = KgBank::new(graphs, &checkpoint.table, &checkpoint.vocab, model.config.k_max)?;
        Ok(ChatEngine {
            max_len: checkpoint.train_config.max_decode_len,
            max_utterance_tokens: checkpoint.link_config.max_context_len,
            link: checkpoint.link_config,
            model,
            vocab: checkpoint.vocab,
            table: checkpoint.table,
            bank,
        })
    }

    pub fn model(&self) -> &KgCopyModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn link_config(&self) -> &LinkConfig {
        &self.link
    }

    pub fn teams(&self) -> Vec<String> {
        self.bank.teams().map(str::to_string).collect()
    }

    pub fn graph(&self, team: &str) -> Option<&LocalKg> {
        self.bank.graph(team)
    }

    /// A new session bound to `team`, which must have a loaded graph (or be
    /// the team-less id).
    pub fn session(&self, id: impl Into<String>, team: &str) -> Result<ChatSession> {
        if !self.bank.covers(team) {
            return Err(Error::UnknownTeam(team.to_string()));
        }
        Ok(ChatSession {
            id: id.into(),
            team: team.to_string(),
            history: VecDeque::new(),
            bound: 2 * self.link.window,
        })
    }

    pub fn turn(&self, session: &mut ChatSession, utterance: &str) -> Result<ChatResponse> {
        let mut tokens = tokenize(utterance);
        if tokens.is_empty() {
            return Err(Error::Empty("utterance"));
        }
        let truncated = tokens.len() > self.max_utterance_tokens;
        tokens.truncate(self.max_utterance_tokens);
        session.push(tokens.join(" "));

        let history: Vec<&str> = session.history().collect();
        let context = encode_context(&history, &self.vocab, self.link.window, self.link.max_context_len);
        let query = query_embedding(&tokens, &self.table, &LexiconTagger);
        let features = self.bank.features(&session.team);
        let gate = self.model.gate_inputs(query.view(), features);
        let decoded = self.model.greedy_decode(&context, &gate, features, self.max_len);

        let (text, spans) = render(&decoded.tokens, &self.vocab, self.bank.graph(&session.team));
        session.push(text.clone());
        Ok(ChatResponse {
            text,
            spans,
            gate_trace: decoded.gates,
            truncated,
        })
    }
}

/// Joins decoded tokens with single spaces and attributes every character to
/// a span. A separating space goes to the vocab side so kg spans cover the
/// object label exactly; between two kg spans it becomes its own vocab span.
pub fn render(tokens: &[OutputToken], vocab: &Vocabulary, kg: Option<&LocalKg>) -> (String, Vec<Span>) {
    let pieces: Vec<(String, SpanSource, Option<usize>)> = tokens
        .iter()
        .map(|&tok| match tok {
            OutputToken::Word(id) => (vocab.token(id).to_string(), SpanSource::Vocab, None),
            OutputToken::Copy(j) => match kg.and_then(|kg| kg.resolve_object(j).ok()) {
                Some(object) => (tokenize(object).join(" "), SpanSource::Kg, Some(j)),
                None => (format!("<copy_{j}>"), SpanSource::Vocab, None),
            },
        })
        .collect();

    let mut text = String::new();
    let mut spans: Vec<Span> = Vec::new();
    let mut pos = 0;
    for (i, (piece, source, triple)) in pieces.iter().enumerate() {
        let mut start = pos;
        if i > 0 {
            text.push(' ');
            pos += 1;
            let left = spans.last_mut().expect("previous span");
            if left.source == SpanSource::Vocab {
                left.end = pos;
                start = pos;
            } else if *source == SpanSource::Kg {
                spans.push(Span {
                    start,
                    end: pos,
                    source: SpanSource::Vocab,
                    triple: None,
                });
                start = pos;
            }
        }
        text.push_str(piece);
        pos += piece.chars().count();
        spans.push(Span {
            start,
            end: pos,
            source: *source,
            triple: *triple,
        });
    }
    (text, spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn kg() -> LocalKg {
        LocalKg::from_triples(
            "arsenal",
            [
                Triple::new("arsenal", "home stadium", "Emirates Stadium").unwrap(),
                Triple::new("arsenal", "coach", "unai emery").unwrap(),
            ],
        )
    }

    fn check_tiling(text: &str, spans: &[Span]) {
        let mut at = 0;
        for s in spans {
            assert_eq!(s.start, at);
            assert!(s.end > s.start);
            at = s.end;
        }
        assert_eq!(at, text.chars().count());
    }

    #[test]
    fn kg_spans_cover_the_object_exactly() {
        let vocab = Vocabulary::from_tokens(["they", "play", "at", "."].map(String::from));
        let toks = [
            OutputToken::Word(vocab.id("they")),
            OutputToken::Word(vocab.id("play")),
            OutputToken::Word(vocab.id("at")),
            OutputToken::Copy(0),
            OutputToken::Word(vocab.id(".")),
        ];
        let (text, spans) = render(&toks, &vocab, Some(&kg()));
        assert_eq!(text, "they play at emirates stadium .");
        check_tiling(&text, &spans);
        let kg_spans: Vec<_> = spans.iter().filter(|s| s.source == SpanSource::Kg).collect();
        assert_eq!(kg_spans.len(), 1);
        let chars: Vec<char> = text.chars().collect();
        let covered: String = chars[kg_spans[0].start..kg_spans[0].end].iter().collect();
        assert_eq!(covered, "emirates stadium");
        assert_eq!(kg_spans[0].triple, Some(0));
    }

    #[test]
    fn adjacent_copies_and_edges_still_tile() {
        let vocab = Vocabulary::from_tokens(["é"].map(String::from));
        for toks in [
            vec![OutputToken::Copy(0), OutputToken::Copy(1)],
            vec![OutputToken::Copy(1)],
            vec![OutputToken::Word(vocab.id("é")), OutputToken::Copy(1), OutputToken::Word(vocab.id("é"))],
            vec![],
        ] {
            let (text, spans) = render(&toks, &vocab, Some(&kg()));
            check_tiling(&text, &spans);
            assert!(spans.iter().filter(|s| s.source == SpanSource::Kg).all(|s| s.triple.is_some()));
        }
    }

    #[test]
    fn unresolvable_copy_renders_as_placeholder() {
        let vocab = Vocabulary::from_tokens(Vec::<String>::new());
        let (text, spans) = render(&[OutputToken::Copy(3)], &vocab, None);
        assert_eq!(text, "<copy_3>");
        assert_eq!(spans[0].source, SpanSource::Vocab);
    }

    #[test]
    fn span_wire_format() {
        let s = Span {
            start: 0,
            end: 4,
            source: SpanSource::Kg,
            triple: Some(2),
        };
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"start":0,"end":4,"source":"kg","triple":2}"#
        );
    }
}

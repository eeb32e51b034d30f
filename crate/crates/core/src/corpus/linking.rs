//! Turns dialogues into supervised examples.
//!
//! For each system turn the answer text is scanned left to right for the
//! longest token span naming an object of the team graph. A matched span is
//! replaced by a single copy token pointing at the triple position and gets
//! sentient label 1; every other target step gets 0.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, EOS, SEP};
use super::{Dialogue, Speaker};
use crate::kg::LocalKg;
use crate::text::{is_punctuation, token_jaccard, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Utterances of history fed to the encoder.
    pub window: usize,
    pub max_context_len: usize,
    /// Minimum token Jaccard for a fuzzy (non-exact) span match.
    pub theta: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            window: 3,
            max_context_len: 80,
            theta: 0.8,
        }
    }
}

/// One step of a target sequence in the extended output space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputToken {
    Word(u32),
    /// Object of the triple at this position in the local graph.
    Copy(usize),
}

impl OutputToken {
    /// Index into the `v + k_max` mixed distribution.
    pub fn extended_id(self, vocab_size: usize) -> usize {
        match self {
            OutputToken::Word(id) => id as usize,
            OutputToken::Copy(j) => vocab_size + j,
        }
    }

    pub fn from_extended(id: usize, vocab_size: usize) -> Self {
        if id < vocab_size {
            OutputToken::Word(id as u32)
        } else {
            OutputToken::Copy(id - vocab_size)
        }
    }

    pub fn is_copy(self) -> bool {
        matches!(self, OutputToken::Copy(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub team_id: String,
    pub context_ids: Vec<u32>,
    /// Tokens of the latest user utterance; the gate's query.
    pub query_tokens: Vec<String>,
    /// Linked target, terminated by EOS.
    pub targets: Vec<OutputToken>,
    pub sentient_labels: Vec<u8>,
    /// The system utterance as written.
    pub response: String,
}

/// One answer-to-triple link, written to the audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub span: String,
    pub triple_position: usize,
    pub score: f64,
}

impl LinkRecord {
    pub fn tsv_header() -> &'static str {
        "dialogue_id\tturn_index\tspan\ttriple_position\tscore"
    }

    pub fn to_tsv(&self) -> String {
        let mut line = String::new();
        let _ = write!(
            line,
            "{}\t{}\t{}\t{}\t{:.4}",
            self.dialogue_id, self.turn_index, self.span, self.triple_position, self.score
        );
        line
    }
}

/// A matched span `[start, end)` of answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanLink {
    pub start: usize,
    pub end: usize,
    pub position: usize,
    pub score: f64,
}

/// Concatenates the last `window` utterances, separated by the SEP token,
/// keeping at most the final `max_len` ids.
pub fn encode_context<S: AsRef<str>>(utterances: &[S], vocab: &Vocabulary, window: usize, max_len: usize) -> Vec<u32> {
    assert!(window >= 1, "context window must be at least 1");
    let start = utterances.len().saturating_sub(window);
    let mut ids = Vec::new();
    for (i, utt) in utterances[start..].iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(vocab.encode(&tokenize(utt.as_ref())));
    }
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    ids
}

/// Finds leftmost-longest object mentions in `tokens`.
pub fn find_object_spans(tokens: &[String], kg: &LocalKg, question: &[String], theta: f64) -> Vec<SpanLink> {
    let objects: Vec<(Vec<String>, &[usize])> = kg
        .object_index()
        .iter()
        .map(|(key, positions)| (key.split(' ').map(str::to_string).collect(), positions.as_slice()))
        .collect();
    let longest = objects.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
    let question: BTreeSet<&str> = question.iter().map(String::as_str).collect();

    let mut exact = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(link) = exact_at(tokens, i, longest, kg, &question) {
            i = link.end;
            exact.push(link);
        } else {
            i += 1;
        }
    }

    // fuzzy matches only fill the gaps left by exact ones
    let mut links = Vec::new();
    let mut start = 0;
    for gap_end in exact.iter().map(|l| l.start).chain([tokens.len()]).collect::<Vec<_>>() {
        let mut i = start;
        while i < gap_end {
            if let Some(link) = fuzzy_at(&tokens[..gap_end], i, longest, &objects, kg, &question, theta) {
                i = link.end;
                links.push(link);
            } else {
                i += 1;
            }
        }
        if let Some(next) = exact.iter().find(|l| l.start == gap_end) {
            start = next.end;
            links.push(next.clone());
        }
    }
    links
}

fn exact_at(tokens: &[String], i: usize, longest: usize, kg: &LocalKg, question: &BTreeSet<&str>) -> Option<SpanLink> {
    let max_len = longest.min(tokens.len() - i);
    (1..=max_len).rev().find_map(|len| {
        let key = tokens[i..i + len].join(" ");
        kg.object_index().get(&key).map(|positions| SpanLink {
            start: i,
            end: i + len,
            position: pick_position(kg, positions, question),
            score: 1.0,
        })
    })
}

fn fuzzy_at(
    tokens: &[String],
    i: usize,
    longest: usize,
    objects: &[(Vec<String>, &[usize])],
    kg: &LocalKg,
    question: &BTreeSet<&str>,
    theta: f64,
) -> Option<SpanLink> {
    if is_punctuation(&tokens[i]) || !objects.iter().any(|(obj, _)| obj.contains(&tokens[i])) {
        return None;
    }
    let max_len = (longest + 1).min(tokens.len() - i);
    let mut best: Option<(f64, usize, &[usize])> = None;
    for len in (1..=max_len).rev() {
        let span = &tokens[i..i + len];
        if is_punctuation(&span[len - 1]) {
            continue;
        }
        for (obj, positions) in objects {
            if !obj.contains(&span[0]) || !obj.contains(&span[len - 1]) {
                continue;
            }
            let score = token_jaccard(span, obj);
            if score >= theta && best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, len, positions));
            }
        }
    }
    best.map(|(score, len, positions)| SpanLink {
        start: i,
        end: i + len,
        position: pick_position(kg, positions, question),
        score,
    })
}

/// Among triples sharing an object, prefer the one whose subject and
/// relation tokens overlap the question most; ties go to the lowest position.
fn pick_position(kg: &LocalKg, positions: &[usize], question: &BTreeSet<&str>) -> usize {
    let overlap = |p: usize| {
        let key: BTreeSet<String> = kg.triples()[p].key_tokens().into_iter().collect();
        key.iter().filter(|t| question.contains(t.as_str())).count()
    };
    let mut best = positions[0];
    let mut best_overlap = overlap(best);
    for &p in &positions[1..] {
        let o = overlap(p);
        if o > best_overlap {
            best = p;
            best_overlap = o;
        }
    }
    best
}

/// One example per system turn of `dialogue`. Without a graph the targets
/// pass through unlinked.
pub fn link_answers(
    dialogue: &Dialogue,
    kg: Option<&LocalKg>,
    vocab: &Vocabulary,
    config: &LinkConfig,
) -> (Vec<TrainingExample>, Vec<LinkRecord>) {
    let mut examples = Vec::new();
    let mut records = Vec::new();
    for (idx, turn) in dialogue.turns.iter().enumerate() {
        if turn.speaker != Speaker::System {
            continue;
        }
        let history: Vec<&str> = dialogue.turns[..idx].iter().map(|t| t.text.as_str()).collect();
        let context_ids = encode_context(&history, vocab, config.window, config.max_context_len);
        let query_tokens = dialogue.turns[..idx]
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::User)
            .map(|t| tokenize(&t.text))
            .unwrap_or_default();

        let answer = tokenize(&turn.text);
        let spans = match kg {
            Some(kg) => find_object_spans(&answer, kg, &query_tokens, config.theta),
            None => Vec::new(),
        };
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        let mut cursor = 0;
        for span in &spans {
            for tok in &answer[cursor..span.start] {
                targets.push(OutputToken::Word(vocab.id(tok)));
                labels.push(0);
            }
            targets.push(OutputToken::Copy(span.position));
            labels.push(1);
            records.push(LinkRecord {
                dialogue_id: dialogue.id.clone(),
                turn_index: idx,
                span: answer[span.start..span.end].join(" "),
                triple_position: span.position,
                score: span.score,
            });
            cursor = span.end;
        }
        for tok in &answer[cursor..] {
            targets.push(OutputToken::Word(vocab.id(tok)));
            labels.push(0);
        }
        targets.push(OutputToken::Word(EOS));
        labels.push(0);

        examples.push(TrainingExample {
            dialogue_id: dialogue.id.clone(),
            turn_index: idx,
            team_id: dialogue.team_id.clone(),
            context_ids,
            query_tokens,
            targets,
            sentient_labels: labels,
            response: turn.text.clone(),
        });
    }
    (examples, records)
}

//! Glue between the corpus, the team graphs and the model inputs.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::linking::{link_answers, LinkConfig, LinkRecord, TrainingExample};
use crate::corpus::{Dialogue, Vocabulary, NO_TEAM};
use crate::embeddings::{query_embedding, EmbeddingTable, PosTagger};
use crate::error::{Error, Result};
use crate::evaluation::EntityMatcher;
use crate::kg::LocalKg;
use crate::model::{GateInputs, KgCopyModel, KgFeatures};
use crate::text::tokenize;

/// Every loaded team graph with its precomputed gate features.
#[derive(Debug, Clone)]
pub struct KgBank {
    graphs: BTreeMap<String, LocalKg>,
    features: BTreeMap<String, KgFeatures>,
    empty: KgFeatures,
}

impl KgBank {
    pub fn new(graphs: BTreeMap<String, LocalKg>, table: &EmbeddingTable, vocab: &Vocabulary, k_max: usize) -> Result<Self> {
        let mut features = BTreeMap::new();
        for (team, kg) in &graphs {
            features.insert(team.clone(), KgFeatures::new(kg, table, vocab, k_max)?);
        }
        Ok(KgBank {
            graphs,
            features,
            empty: KgFeatures::empty(table.dim()),
        })
    }

    pub fn teams(&self) -> impl Iterator<Item = &str> {
        self.graphs.keys().map(String::as_str)
    }

    pub fn graph(&self, team: &str) -> Option<&LocalKg> {
        self.graphs.get(team)
    }

    /// True for loaded teams and for team-less chat.
    pub fn covers(&self, team: &str) -> bool {
        team == NO_TEAM || self.graphs.contains_key(team)
    }

    /// Gate features of `team`; an empty graph when it has none.
    pub fn features(&self, team: &str) -> &KgFeatures {
        self.features.get(team).unwrap_or(&self.empty)
    }

    /// Entity matchers for scoring. Team-less chat gets an empty matcher so
    /// its responses count as having no gold entities.
    pub fn matchers(&self) -> BTreeMap<String, EntityMatcher> {
        let mut out: BTreeMap<String, EntityMatcher> =
            self.graphs.iter().map(|(t, kg)| (t.clone(), EntityMatcher::new(kg))).collect();
        out.insert(NO_TEAM.to_string(), EntityMatcher::default());
        out
    }

    /// Tokens the embedding table needs beyond the vocabulary.
    pub fn graph_tokens(graphs: &BTreeMap<String, LocalKg>) -> Vec<String> {
        let set: BTreeSet<String> = graphs
            .values()
            .flat_map(|kg| kg.triples().iter())
            .flat_map(|t| [&t.subject, &t.relation, &t.object])
            .flat_map(|s| tokenize(s))
            .collect();
        set.into_iter().collect()
    }
}

/// Linked examples plus the per-example gate inputs.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub examples: Vec<TrainingExample>,
    pub gates: Vec<GateInputs>,
    pub links: Vec<LinkRecord>,
    /// Teams referenced by dialogues but absent from the bank.
    pub missing_teams: BTreeSet<String>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The first `n` examples (with their gates), keeping link records.
    pub fn truncate(&mut self, n: usize) {
        self.examples.truncate(n);
        self.gates.truncate(n);
    }
}

/// Links every dialogue and computes gate inputs. Dialogues of teams with
/// no graph are linked against nothing and recorded in `missing_teams`.
pub fn prepare(
    dialogues: &[Dialogue],
    bank: &KgBank,
    model: &KgCopyModel,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    tagger: &dyn PosTagger,
    link: &LinkConfig,
) -> Prepared {
    let mut out = Prepared::default();
    for d in dialogues {
        if !bank.covers(&d.team_id) {
            out.missing_teams.insert(d.team_id.clone());
        }
        let (examples, links) = link_answers(d, bank.graph(&d.team_id), vocab, link);
        for ex in examples {
            if ex.context_ids.is_empty() {
                // a system turn with no preceding text has nothing to encode
                log::warn!("{} turn {}: empty context, skipped", ex.dialogue_id, ex.turn_index);
                continue;
            }
            let query = query_embedding(&ex.query_tokens, table, tagger);
            out.gates.push(model.gate_inputs(query.view(), bank.features(&ex.team_id)));
            out.examples.push(ex);
        }
        out.links.extend(links);
    }
    out
}

/// Fails when any team in `prepared` lacks a graph.
pub fn require_graphs(prepared: &Prepared) -> Result<()> {
    match prepared.missing_teams.iter().next() {
        Some(team) => Err(Error::UnknownTeam(team.clone())),
        None => Ok(()),
    }
}

/// Greedy-decodes every prepared example and pairs it with its reference.
pub fn decode_all(
    model: &KgCopyModel,
    prepared: &Prepared,
    bank: &KgBank,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<crate::evaluation::ScoredResponse> {
    prepared
        .examples
        .iter()
        .zip(&prepared.gates)
        .map(|(ex, gate)| {
            let decoded = model.greedy_decode(&ex.context_ids, gate, bank.features(&ex.team_id), max_len);
            crate::evaluation::ScoredResponse {
                dialogue_id: ex.dialogue_id.clone(),
                turn_index: ex.turn_index,
                team_id: ex.team_id.clone(),
                reference: tokenize(&ex.response),
                hypothesis: crate::evaluation::render_tokens(&decoded.tokens, vocab, bank.graph(&ex.team_id), true),
            }
        })
        .collect()
}

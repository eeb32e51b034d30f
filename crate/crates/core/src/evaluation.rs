//! Corpus BLEU, entity-F1 and split reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::linking::OutputToken;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::kg::LocalKg;
use crate::text::tokenize;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level 4-gram BLEU on a 0-100 scale.
///
/// Clipped n-gram matches and candidate counts are summed over the corpus
/// before taking precisions. An order n >= 2 with no matches gets add-one
/// smoothing, (0 + 1) / (total + 1); unigram precision is never smoothed,
/// so a corpus with no shared word scores 0.
pub fn bleu(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Config(format!(
            "bleu: {} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Empty("bleu corpus"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut ref_len = 0;
    let mut hyp_len = 0;
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=MAX_ORDER {
            let hyp = ngram_counts(h, n);
            let rf = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hyp
                .iter()
                .map(|(gram, &c)| c.min(rf.get(gram).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / MAX_ORDER as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Finds KG entity labels (subjects and objects) in token sequences by
/// leftmost-longest matching.
#[derive(Debug, Clone, Default)]
pub struct EntityMatcher {
    keys: BTreeSet<Vec<String>>,
    longest: usize,
}

impl EntityMatcher {
    pub fn new(kg: &LocalKg) -> Self {
        let keys: BTreeSet<Vec<String>> = kg
            .entity_keys()
            .iter()
            .map(|k| k.split(' ').map(str::to_string).collect())
            .collect();
        let longest = keys.iter().map(Vec::len).max().unwrap_or(0);
        EntityMatcher { keys, longest }
    }

    pub fn entities(&self, tokens: &[String]) -> BTreeSet<String> {
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            match (1..=max).rev().find(|&n| self.keys.contains(&tokens[i..i + n])) {
                Some(n) => {
                    found.insert(tokens[i..i + n].join(" "));
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// One scored pair. `matcher` is `None` when the team has no graph, which
/// leaves the pair out of entity-F1.
#[derive(Debug, Clone, Copy)]
pub struct EntityPair<'a> {
    pub reference: &'a [String],
    pub hypothesis: &'a [String],
    pub matcher: Option<&'a EntityMatcher>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityF1 {
    /// Percentage in [0, 100].
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Pairs with a non-empty gold set; only these are averaged.
    pub counted: usize,
    pub without_gold: usize,
    pub without_kg: usize,
}

impl EntityF1 {
    pub fn is_defined(&self) -> bool {
        self.counted > 0
    }
}

/// Micro-averaged entity-F1 over pairs whose gold entity set is non-empty.
pub fn entity_f1(pairs: &[EntityPair<'_>]) -> EntityF1 {
    let mut out = EntityF1::default();
    for pair in pairs {
        let Some(matcher) = pair.matcher else {
            out.without_kg += 1;
            continue;
        };
        let gold = matcher.entities(pair.reference);
        if gold.is_empty() {
            out.without_gold += 1;
            continue;
        }
        let predicted = matcher.entities(pair.hypothesis);
        let tp = gold.intersection(&predicted).count();
        out.true_positives += tp;
        out.false_positives += predicted.len() - tp;
        out.false_negatives += gold.len() - tp;
        out.counted += 1;
    }
    if out.counted == 0 {
        log::warn!("entity-F1 undefined: no response has a gold entity; reporting 0");
        return out;
    }
    let tp = out.true_positives as f64;
    let predicted = tp + out.false_positives as f64;
    let gold = tp + out.false_negatives as f64;
    out.precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    out.recall = tp / gold;
    out.f1 = if tp > 0.0 { 100.0 * 2.0 * tp / (predicted + gold) } else { 0.0 };
    out
}

/// Surface tokens of a decoded response. Copies become the tokens of the
/// triple's object, or a `<copy_j>` placeholder when `resolve` is off or
/// the graph is missing.
pub fn render_tokens(tokens: &[OutputToken], vocab: &Vocabulary, kg: Option<&LocalKg>, resolve: bool) -> Vec<String> {
    let mut out = Vec::new();
    for &tok in tokens {
        match tok {
            OutputToken::Word(id) => out.push(vocab.token(id).to_string()),
            OutputToken::Copy(j) => match kg.filter(|_| resolve).and_then(|kg| kg.resolve_object(j).ok()) {
                Some(object) => out.extend(tokenize(object)),
                None => out.push(format!("<copy_{j}>")),
            },
        }
    }
    out
}

/// A reference/hypothesis pair tagged with its team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub team_id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamReport {
    pub responses: usize,
    pub with_gold: usize,
    pub bleu: f64,
    pub entity_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub bleu: f64,
    pub entity_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub responses: usize,
    pub with_gold: usize,
    pub without_gold: usize,
    /// Responses of teams without a graph; scored for BLEU only.
    pub skipped_no_kg: usize,
    pub teams_without_kg: Vec<String>,
    pub per_team: BTreeMap<String, TeamReport>,
    pub warnings: Vec<String>,
}

/// Scores already-decoded responses. Teams missing from `matchers` are
/// listed and left out of entity-F1.
pub fn score_responses(
    split: &str,
    responses: &[ScoredResponse],
    matchers: &BTreeMap<String, EntityMatcher>,
) -> Result<EvalReport> {
    let refs: Vec<Vec<String>> = responses.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<Vec<String>> = responses.iter().map(|r| r.hypothesis.clone()).collect();
    let corpus_bleu = bleu(&refs, &hyps)?;
    fn pair<'a>(r: &'a ScoredResponse, matchers: &'a BTreeMap<String, EntityMatcher>) -> EntityPair<'a> {
        EntityPair {
            reference: &r.reference,
            hypothesis: &r.hypothesis,
            matcher: matchers.get(&r.team_id),
        }
    }
    let f1 = entity_f1(&responses.iter().map(|r| pair(r, matchers)).collect::<Vec<_>>());

    let mut by_team: BTreeMap<&str, Vec<&ScoredResponse>> = BTreeMap::new();
    for r in responses {
        by_team.entry(&r.team_id).or_default().push(r);
    }
    let mut per_team = BTreeMap::new();
    for (team, items) in &by_team {
        let refs: Vec<Vec<String>> = items.iter().map(|r| r.reference.clone()).collect();
        let hyps: Vec<Vec<String>> = items.iter().map(|r| r.hypothesis.clone()).collect();
        let team_f1 = entity_f1(&items.iter().map(|r| pair(r, matchers)).collect::<Vec<_>>());
        per_team.insert(
            team.to_string(),
            TeamReport {
                responses: items.len(),
                with_gold: team_f1.counted,
                bleu: bleu(&refs, &hyps)?,
                entity_f1: team_f1.f1,
            },
        );
    }
    let teams_without_kg: Vec<String> = by_team
        .keys()
        .filter(|t| !matchers.contains_key(**t))
        .map(|t| t.to_string())
        .collect();
    let mut warnings = Vec::new();
    if !f1.is_defined() {
        warnings.push("entity-F1 undefined: no response has a gold entity".to_string());
    }
    if !teams_without_kg.is_empty() {
        warnings.push(format!("no knowledge graph for: {}", teams_without_kg.join(", ")));
    }
    Ok(EvalReport {
        split: split.to_string(),
        bleu: corpus_bleu,
        entity_f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        responses: responses.len(),
        with_gold: f1.counted,
        without_gold: f1.without_gold,
        skipped_no_kg: f1.without_kg,
        teams_without_kg,
        per_team,
        warnings,
    })
}

/// Greedy-decodes every system turn of `dialogues` with the checkpoint and
/// scores the split. `corpus_vocab_hash`, when given, must match the
/// checkpoint's vocabulary.
pub fn evaluate_split(
    ckpt: &crate::checkpoint::Checkpoint,
    split: &str,
    dialogues: &[crate::corpus::Dialogue],
    graphs: &BTreeMap<String, LocalKg>,
    corpus_vocab_hash: Option<&str>,
) -> Result<EvalReport> {
    if let Some(hash) = corpus_vocab_hash {
        ckpt.check_vocab(hash)?;
    }
    let model = ckpt.model();
    let bank = crate::pipeline::KgBank::new(graphs.clone(), &ckpt.table, &ckpt.vocab, ckpt.model_config.k_max)?;
    let tagger = crate::embeddings::LexiconTagger;
    let prepared = crate::pipeline::prepare(dialogues, &bank, &model, &ckpt.vocab, &ckpt.table, &tagger, &ckpt.link_config);
    let responses = crate::pipeline::decode_all(&model, &prepared, &bank, &ckpt.vocab, ckpt.train_config.max_decode_len);
    score_responses(split, &responses, &bank.matchers())
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split: {}  responses: {}", self.split, self.responses)?;
        writeln!(f, "{:<16} {:>9} {:>10} {:>10}", "team", "responses", "BLEU", "entity-F1")?;
        for (team, r) in &self.per_team {
            writeln!(f, "{:<16} {:>9} {:>10.2} {:>10.2}", team, r.responses, r.bleu, r.entity_f1)?;
        }
        writeln!(f, "{:<16} {:>9} {:>10.2} {:>10.2}", "ALL", self.responses, self.bleu, self.entity_f1)?;
        write!(
            f,
            "with gold entities: {}  without: {}  no graph: {}",
            self.with_gold, self.without_gold, self.skipped_no_kg
        )?;
        for w in &self.warnings {
            write!(f, "\nwarning: {w}")?;
        }
        Ok(())
    }
}

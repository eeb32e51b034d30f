//! Per-team local knowledge graphs.
//!
//! A team's graph is read from `kg/<team_id>.tsv`, one
//! `subject<TAB>relation<TAB>object` record per line. Triple order is the
//! file order with duplicates dropped (first occurrence wins), so triple
//! positions are stable and can be used as copy targets.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::text::{entity_key, tokenize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    /// Builds a triple, rejecting empty fields and subject/relation labels
    /// that produce no tokens.
    pub fn new(subject: &str, relation: &str, object: &str) -> std::result::Result<Self, String> {
        let clean = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        let (subject, relation, object) = (clean(subject), clean(relation), clean(object));
        for (name, value) in [("subject", &subject), ("relation", &relation), ("object", &object)] {
            if value.is_empty() {
                return Err(format!("empty {name}"));
            }
        }
        if tokenize(&subject).is_empty() || tokenize(&relation).is_empty() {
            return Err("subject and relation must contain at least one token".into());
        }
        Ok(Triple {
            subject,
            relation,
            object,
        })
    }

    /// Tokens of the subject followed by tokens of the relation.
    pub fn key_tokens(&self) -> Vec<String> {
        let mut tokens = tokenize(&self.subject);
        tokens.extend(tokenize(&self.relation));
        tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalKg {
    pub team_id: String,
    triples: Vec<Triple>,
    /// normalized object label -> ascending triple positions
    object_index: BTreeMap<String, Vec<usize>>,
}

impl LocalKg {
    /// Builds a graph from triples in order, dropping repeated triples.
    pub fn from_triples(team_id: impl Into<String>, triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut seen = HashSet::new();
        let triples: Vec<Triple> = triples.into_iter().filter(|t| seen.insert(t.clone())).collect();
        let mut object_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (pos, triple) in triples.iter().enumerate() {
            object_index.entry(entity_key(&triple.object)).or_default().push(pos);
        }
        LocalKg {
            team_id: team_id.into(),
            triples,
            object_index,
        }
    }

    pub fn k(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn object_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.object_index
    }

    /// Positions whose object normalizes to the same key as `label`.
    pub fn positions_of(&self, label: &str) -> &[usize] {
        self.object_index
            .get(&entity_key(label))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn resolve_object(&self, position: usize) -> Result<&str> {
        self.triples
            .get(position)
            .map(|t| t.object.as_str())
            .ok_or(Error::TripleIndex {
                position,
                k: self.k(),
            })
    }

    /// Distinct normalized entity labels (subjects and objects).
    pub fn entity_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .triples
            .iter()
            .flat_map(|t| [entity_key(&t.subject), entity_key(&t.object)])
            .filter(|k| !k.is_empty())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    pub fn relation_count(&self) -> usize {
        self.triples
            .iter()
            .map(|t| entity_key(&t.relation))
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Reads a team graph from a TSV file.
pub fn load_team_kg(path: impl AsRef<Path>, team_id: &str) -> Result<LocalKg> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |reason: String| Error::KgParse {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        triples.push(Triple::new(fields[0], fields[1], fields[2]).map_err(parse_err)?);
    }
    if triples.is_empty() {
        return Err(Error::EmptyKg {
            path: path.to_path_buf(),
        });
    }
    Ok(LocalKg::from_triples(team_id, triples))
}

/// Loads every `<team>.tsv` in a directory, keyed by team id.
pub fn load_kg_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, LocalKg>> {
    let dir = dir.as_ref();
    let mut kgs = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("tsv") {
            continue;
        }
        let Some(team) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        kgs.insert(team.to_string(), load_team_kg(&path, team)?);
    }
    Ok(kgs)
}

/// Per-triple average of subject and relation token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleEmbeddingMatrix {
    rows: Array2<f64>,
}

impl TripleEmbeddingMatrix {
    pub fn k(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// Rows right-padded with zeros to `k_max`, with a validity mask.
    pub fn padded(&self, k_max: usize) -> (Array2<f64>, Vec<bool>) {
        let mut out = Array2::zeros((k_max.max(self.k()), self.dim()));
        out.slice_mut(ndarray::s![..self.k(), ..]).assign(&self.rows);
        let mask = (0..out.nrows()).map(|i| i < self.k()).collect();
        (out, mask)
    }
}

pub fn embed_triples(kg: &LocalKg, table: &EmbeddingTable) -> TripleEmbeddingMatrix {
    let mut rows = Array2::zeros((kg.k(), table.dim()));
    for (i, triple) in kg.triples().iter().enumerate() {
        let tokens = triple.key_tokens();
        let mut acc = Array1::<f64>::zeros(table.dim());
        for tok in &tokens {
            acc += &table.vector(tok);
        }
        acc /= tokens.len() as f64;
        rows.row_mut(i).assign(&acc);
    }
    TripleEmbeddingMatrix { rows }
}

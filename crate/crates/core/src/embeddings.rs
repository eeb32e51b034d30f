//! Pretrained word vectors and the content-word query average used by the
//! sentient gate.
//!
//! The table is frozen: it feeds the gate features (query, decoder-input and
//! triple embeddings) and initializes the model's trainable embedding layer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{Vocabulary, PAD_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};

/// Dimension of the pretrained vectors the model is configured for by default.
pub const DEFAULT_DIM: usize = 300;

/// Half-width of the uniform range used for tokens missing from the file.
const RANDOM_INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StoredTable", into = "StoredTable")]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    unk: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Array2<f64>,
    unk: Array1<f64>,
}

impl From<StoredTable> for EmbeddingTable {
    fn from(s: StoredTable) -> Self {
        let index = s.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        EmbeddingTable {
            dim: s.dim,
            tokens: s.tokens,
            index,
            vectors: s.vectors,
            unk: s.unk,
        }
    }
}

impl From<EmbeddingTable> for StoredTable {
    fn from(t: EmbeddingTable) -> Self {
        StoredTable {
            dim: t.dim,
            tokens: t.tokens,
            vectors: t.vectors,
            unk: t.unk,
        }
    }
}

impl EmbeddingTable {
    /// Reads a text vector file (`N D` header, then `token v1 .. vD` lines),
    /// keeping only the vocabulary tokens and `extra` tokens (KG labels).
    /// Requested tokens absent from the file get seeded uniform vectors.
    pub fn load_pretrained(
        path: impl AsRef<Path>,
        dim: usize,
        vocab: &Vocabulary,
        extra: &[String],
        seed: u64,
    ) -> Result<Self> {
        let path = path.as_ref();
        let wanted = wanted_tokens(vocab, extra);
        let lookup: HashMap<&str, ()> = wanted.iter().map(|t| (t.as_str(), ())).collect();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let fmt_err = |line: usize, reason: String| Error::EmbeddingFormat {
            path: path.to_path_buf(),
            line,
            reason,
        };

        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(fmt_err(1, "missing header".into())),
        };
        let mut parts = header.split_whitespace();
        let declared_dim: usize = match (parts.next(), parts.next().map(str::parse)) {
            (Some(_), Some(Ok(d))) => d,
            _ => return Err(fmt_err(1, format!("bad header {header:?}"))),
        };
        if declared_dim != dim {
            return Err(fmt_err(1, format!("declared dimension {declared_dim}, expected {dim}")));
        }

        let mut found: HashMap<String, Vec<f64>> = HashMap::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let Some(token) = fields.next() else { continue };
            if !lookup.contains_key(token) || found.contains_key(token) {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| fmt_err(line_no, e.to_string()))?;
            if values.len() != dim {
                return Err(fmt_err(line_no, format!("{} values, expected {dim}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fmt_err(line_no, "non-finite value".into()));
            }
            found.insert(token.to_string(), values);
        }
        Ok(Self::assemble(dim, wanted, found, seed))
    }

    /// Table with no pretrained vectors: every token gets a seeded vector.
    pub fn random(dim: usize, vocab: &Vocabulary, extra: &[String], seed: u64) -> Self {
        Self::assemble(dim, wanted_tokens(vocab, extra), HashMap::new(), seed)
    }

    /// Builds a table from explicit vectors; `unk` defaults to zero.
    pub fn from_vectors<'a>(
        dim: usize,
        entries: impl IntoIterator<Item = (&'a str, Vec<f64>)>,
        unk: Option<Vec<f64>>,
    ) -> Self {
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for (tok, vec) in entries {
            assert_eq!(vec.len(), dim, "vector for {tok:?} has wrong dimension");
            tokens.push(tok.to_string());
            rows.extend(vec);
        }
        let vectors = Array2::from_shape_vec((tokens.len(), dim), rows).expect("shape");
        let unk = unk.map(Array1::from).unwrap_or_else(|| Array1::zeros(dim));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        EmbeddingTable {
            dim,
            tokens,
            index,
            vectors,
            unk,
        }
    }

    fn assemble(dim: usize, wanted: Vec<String>, found: HashMap<String, Vec<f64>>, seed: u64) -> Self {
        let mut vectors = Array2::zeros((wanted.len(), dim));
        let mut loaded_sum = Array1::<f64>::zeros(dim);
        for (i, tok) in wanted.iter().enumerate() {
            let mut row = vectors.row_mut(i);
            if let Some(v) = found.get(tok) {
                row.assign(&ArrayView1::from(v.as_slice()));
                loaded_sum += &row;
            } else if tok != PAD_TOKEN {
                let mut rng = ChaCha8Rng::seed_from_u64(token_seed(seed, tok));
                row.mapv_inplace(|_| rng.random_range(-RANDOM_INIT_RANGE..=RANDOM_INIT_RANGE));
            }
        }
        let unk = if found.is_empty() {
            Array1::zeros(dim)
        } else {
            loaded_sum / found.len() as f64
        };
        if let Some(&i) = wanted.iter().position(|t| t == UNK_TOKEN).as_ref() {
            vectors.row_mut(i).assign(&unk);
        }
        let index = wanted.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        EmbeddingTable {
            dim,
            tokens: wanted,
            index,
            vectors,
            unk,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Vector for `token`, falling back to the UNK vector.
    pub fn vector(&self, token: &str) -> ArrayView1<'_, f64> {
        match self.index.get(token) {
            Some(&i) => self.vectors.row(i),
            None => self.unk.view(),
        }
    }

    pub fn unk(&self) -> ArrayView1<'_, f64> {
        self.unk.view()
    }

    /// One row per vocabulary id, in id order.
    pub fn vocab_matrix(&self, vocab: &Vocabulary) -> Array2<f64> {
        let mut out = Array2::zeros((vocab.len(), self.dim));
        for (id, tok) in vocab.tokens().iter().enumerate() {
            out.row_mut(id).assign(&self.vector(tok));
        }
        out
    }
}

fn wanted_tokens(vocab: &Vocabulary, extra: &[String]) -> Vec<String> {
    let mut wanted: Vec<String> = vocab.tokens().to_vec();
    let mut extra: Vec<&String> = extra.iter().filter(|t| !vocab.contains(t)).collect();
    extra.sort();
    extra.dedup();
    wanted.extend(extra.into_iter().cloned());
    wanted
}

// FNV-1a over the token bytes, mixed with the run seed.
fn token_seed(seed: u64, token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Coarse universal part-of-speech classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Propn,
    Verb,
    Aux,
    Adj,
    Adv,
    Pron,
    Det,
    Adp,
    Conj,
    Part,
    Num,
    Intj,
    Punct,
}

impl PosTag {
    /// Whether the tag contributes to the query embedding.
    pub fn is_content(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Propn | PosTag::Verb)
    }
}

/// Adapter point for part-of-speech tagging. An external tagger can be
/// plugged in by implementing this trait; it must return one tag per token.
pub trait PosTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Closed-class lexicon plus suffix rules; anything unrecognized is a noun.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger;

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "some", "any", "every", "each", "no", "all",
    "both", "either", "neither", "another", "such",
];
const PRONOUNS: &[&str] = &[
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers",
    "it", "its", "we", "us", "our", "ours", "they", "them", "their", "theirs", "who", "whom",
    "whose", "which", "what", "myself", "yourself", "itself", "themselves", "someone",
    "something", "anyone", "anything", "everyone", "everything", "nobody", "nothing", "one",
];
const AUXILIARIES: &[&str] = &[
    "is", "am", "are", "was", "were", "be", "been", "being", "do", "does", "did", "have", "has",
    "had", "will", "would", "shall", "should", "can", "could", "may", "might", "must",
];
const ADPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "by", "for", "with", "about", "against", "between", "into",
    "through", "during", "before", "after", "above", "below", "to", "from", "up", "down", "over",
    "under", "than", "as",
];
const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "so", "yet", "if", "because", "while", "although", "though",
    "whether", "then",
];
const PARTICLES: &[&str] = &["not", "s", "t", "re", "ve", "ll", "d", "m", "n't"];
const ADVERBS: &[&str] = &[
    "very", "really", "too", "also", "just", "only", "still", "already", "ever", "never",
    "always", "often", "here", "there", "now", "how", "when", "where", "why", "well", "much",
    "more", "most", "pretty", "quite", "again", "maybe", "perhaps", "currently", "actually",
    "probably", "even", "lot",
];
const INTERJECTIONS: &[&str] = &[
    "hi", "hello", "hey", "thanks", "bye", "goodbye", "ok", "okay", "oh", "wow", "yeah", "yes",
    "please", "welcome",
];
const ADJECTIVES: &[&str] = &[
    "good", "great", "best", "better", "bad", "worst", "worse", "favorite", "favourite", "big",
    "small", "old", "new", "current", "nice", "top", "many", "few", "other", "own", "same",
    "different", "amazing", "awesome", "interesting", "strong", "famous", "sure", "happy",
    "right", "wrong", "fine",
];
const VERBS: &[&str] = &[
    "know", "think", "like", "love", "play", "plays", "win", "won", "wins", "score", "tell",
    "say", "said", "see", "saw", "want", "go", "went", "make", "made", "get", "got", "watch",
    "support", "call", "mean", "lead", "led", "hold", "manage", "hate", "prefer", "believe",
    "guess", "wonder", "hope", "feel", "look", "seem", "take", "give", "become", "became",
    "beat", "lose", "lost", "finish", "qualify", "join", "sign", "coached", "captains",
];

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens.iter().map(|t| tag_token(t)).collect()
    }
}

fn tag_token(token: &str) -> PosTag {
    let in_list = |list: &[&str]| list.contains(&token);
    if crate::text::is_punctuation(token) {
        PosTag::Punct
    } else if token.chars().all(|c| c.is_ascii_digit()) {
        PosTag::Num
    } else if in_list(DETERMINERS) {
        PosTag::Det
    } else if in_list(PRONOUNS) {
        PosTag::Pron
    } else if in_list(AUXILIARIES) {
        PosTag::Aux
    } else if in_list(ADPOSITIONS) {
        PosTag::Adp
    } else if in_list(CONJUNCTIONS) {
        PosTag::Conj
    } else if in_list(PARTICLES) {
        PosTag::Part
    } else if in_list(ADVERBS) {
        PosTag::Adv
    } else if in_list(INTERJECTIONS) {
        PosTag::Intj
    } else if in_list(ADJECTIVES) {
        PosTag::Adj
    } else if in_list(VERBS) || (token.len() > 4 && (token.ends_with("ing") || token.ends_with("ed"))) {
        PosTag::Verb
    } else if token.len() > 4 && token.ends_with("ly") {
        PosTag::Adv
    } else {
        PosTag::Noun
    }
}

/// Mean embedding of the content words (noun/proper noun/verb) of `tokens`,
/// or of all tokens when none qualifies.
pub fn content_word_average(tokens: &[String], tags: &[PosTag], table: &EmbeddingTable) -> Array1<f64> {
    assert_eq!(tokens.len(), tags.len(), "one tag per token");
    let content: Vec<&String> = tokens
        .iter()
        .zip(tags)
        .filter(|(_, tag)| tag.is_content())
        .map(|(tok, _)| tok)
        .collect();
    let selected: Vec<&String> = if content.is_empty() {
        tokens.iter().collect()
    } else {
        content
    };
    let mut acc = Array1::<f64>::zeros(table.dim());
    if selected.is_empty() {
        return acc;
    }
    for tok in &selected {
        acc += &table.vector(tok);
    }
    acc / selected.len() as f64
}

/// Tags `tokens` and averages their content words.
pub fn query_embedding(tokens: &[String], table: &EmbeddingTable, tagger: &dyn PosTagger) -> Array1<f64> {
    let tags = tagger.tag(tokens);
    content_word_average(tokens, &tags, table)
}

//! Conversation ingestion, vocabulary construction and answer linking.
//!
//! Conversations are JSON Lines, one dialogue per line:
//! `{"id": str, "team": str, "turns": [{"speaker": "user"|"system", "text": str}]}`.
//! The split a file belongs to is taken from its file stem or its parent
//! directory name (`train`, `valid`/`val`/`dev`, `test`).

pub mod linking;
pub mod vocab;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize;

pub use linking::{encode_context, link_answers, LinkConfig, LinkRecord, OutputToken, TrainingExample};
pub use vocab::Vocabulary;

/// Team id used for conversations that are not about a specific team.
pub const NO_TEAM: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn from_name(name: &str) -> Option<Split> {
        match name.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "valid" | "val" | "validation" | "dev" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn from_path(path: &Path) -> Option<Split> {
        let stem = path.file_stem().and_then(|s| s.to_str()).and_then(Split::from_name);
        stem.or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .and_then(|s| s.to_str())
                .and_then(Split::from_name)
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Split::from_name(s).ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(rename = "team")]
    pub team_id: String,
    pub turns: Vec<Turn>,
    #[serde(skip)]
    pub split: Option<Split>,
}

impl Dialogue {
    /// Checks speaker alternation (user first) and non-empty utterances.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if turn.speaker != expected {
                return Err(format!("turn {i}: expected {expected:?} speaker"));
            }
            if normalize(&turn.text).is_empty() {
                return Err(format!("turn {i}: empty utterance"));
            }
        }
        Ok(())
    }

    pub fn system_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::System).count()
    }
}

/// Reads a JSON Lines conversation file, preserving dialogue and turn order.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = Split::from_path(path);
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |id: String, reason: String| Error::DialogueParse {
            path: path.to_path_buf(),
            line: idx + 1,
            id,
            reason,
        };
        let mut dialogue: Dialogue = serde_json::from_str(line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                .unwrap_or_else(|| "?".into());
            parse_err(id, e.to_string())
        })?;
        dialogue
            .validate()
            .map_err(|reason| parse_err(dialogue.id.clone(), reason))?;
        dialogue.split = split;
        out.push(dialogue);
    }
    Ok(out)
}

/// Writes dialogues in the JSON Lines conversation format.
pub fn write_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for d in dialogues {
        buf.push_str(&serde_json::to_string(d)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads `<dir>/<split>.jsonl`.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Dialogue>> {
    load_dialogues(dir.as_ref().join(format!("{}.jsonl", split.name())))
}

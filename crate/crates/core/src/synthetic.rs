//! Generated toy corpus: five teams with five facts each, templated factoid
//! questions and chit-chat. Validation and test dialogues phrase questions
//! with templates never seen in training.
//!
//! Every answer puts the object right after "is" or "in", and no other
//! response uses those words before a non-object. The gate is linear in its
//! inputs, so it cannot learn "copy after `is` for one relation but not for
//! another"; templates that need that distinction cap its accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_dialogues, Dialogue, Speaker, Split, Turn};
use crate::error::{Error, Result};
use crate::kg::{LocalKg, Triple};

const RELATIONS: [&str; 5] = ["captain", "coach", "nickname", "founded in", "home stadium"];

const TEAMS: [(&str, [&str; 5]); 5] = [
    ("argentina", ["lionel messi", "lionel scaloni", "la albiceleste", "1893", "estadio monumental"]),
    ("italy", ["giorgio chiellini", "roberto mancini", "gli azzurri", "1898", "stadio olimpico"]),
    ("iceland", ["aron gunnarsson", "erik hamren", "strakarnir okkar", "1947", "laugardalsvollur"]),
    ("mexico", ["andres guardado", "gerardo martino", "el tri", "1927", "estadio azteca"]),
    ("arsenal", ["granit xhaka", "unai emery", "the gunners", "1886", "emirates stadium"]),
];

struct Templates {
    train: &'static [&'static str],
    held_out: &'static [&'static str],
    /// Follow-ups that refer to the team only through "their"/"they".
    follow_train: &'static str,
    follow_held_out: &'static str,
    answer: &'static str,
}

const TEMPLATES: [Templates; 5] = [
    Templates {
        train: &[
            "who is the captain of {team} ?",
            "tell me who the captain of {team} is .",
            "which player is the captain of {team} ?",
        ],
        held_out: &["do you know the captain of {team} ?", "name the captain of {team} for me ."],
        follow_train: "who is their captain ?",
        follow_held_out: "and their captain ?",
        answer: "the captain is {obj} .",
    },
    Templates {
        train: &[
            "who is the coach of {team} ?",
            "tell me who the coach of {team} is .",
            "which person is the coach of {team} ?",
        ],
        held_out: &["do you know the coach of {team} ?", "name the coach of {team} for me ."],
        follow_train: "who is their coach ?",
        follow_held_out: "and their coach ?",
        answer: "the coach is {obj} .",
    },
    Templates {
        train: &[
            "what is the nickname of {team} ?",
            "tell me the nickname of {team} .",
            "what nickname does {team} have ?",
        ],
        held_out: &["do you know the nickname of {team} ?", "name the nickname of {team} for me ."],
        follow_train: "what is their nickname ?",
        follow_held_out: "and their nickname ?",
        answer: "their nickname is {obj} .",
    },
    Templates {
        train: &[
            "when was {team} founded ?",
            "tell me when {team} was founded .",
            "what year was {team} founded ?",
        ],
        held_out: &["do you know when {team} was founded ?", "name the year {team} was founded for me ."],
        follow_train: "when were they founded ?",
        follow_held_out: "and when were they founded ?",
        answer: "they were founded in {obj} .",
    },
    Templates {
        train: &[
            "what is the home stadium of {team} ?",
            "tell me the home stadium of {team} .",
            "where is the home stadium of {team} ?",
        ],
        held_out: &["do you know the home stadium of {team} ?", "name the home stadium of {team} for me ."],
        follow_train: "what is their home stadium ?",
        follow_held_out: "and their home stadium ?",
        answer: "their home stadium is {obj} .",
    },
];

const OPENERS: [(&str, &str); 2] = [
    ("hi there !", "hello ! what would you like to know ?"),
    ("i like this team a lot .", "me too , they are fun to watch ."),
];

const CLOSERS: [(&str, &str); 2] = [
    ("thanks for the help .", "you are welcome ."),
    ("that is interesting .", "yes , very interesting ."),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dialogues: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dialogues: 200,
            valid: 20,
            test: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub graphs: BTreeMap<String, LocalKg>,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

pub fn graphs() -> BTreeMap<String, LocalKg> {
    TEAMS
        .iter()
        .map(|(team, objects)| {
            let triples = RELATIONS
                .iter()
                .zip(objects)
                .map(|(rel, obj)| Triple::new(team, rel, obj).expect("static triple"));
            (team.to_string(), LocalKg::from_triples(*team, triples))
        })
        .collect()
}

fn dialogue(id: String, team_idx: usize, held_out: bool, rng: &mut ChaCha8Rng) -> Dialogue {
    let (team, objects) = TEAMS[team_idx];
    let mut turns = Vec::new();
    let mut say = |user: String, system: String| {
        turns.push(Turn {
            speaker: Speaker::User,
            text: user,
        });
        turns.push(Turn {
            speaker: Speaker::System,
            text: system,
        });
    };
    if rng.random_bool(0.5) {
        let (u, s) = OPENERS.choose(rng).expect("non-empty");
        say(u.to_string(), s.to_string());
    }
    let first = rng.random_range(0..RELATIONS.len());
    let second = (first + rng.random_range(1..RELATIONS.len())) % RELATIONS.len();
    for (n, rel) in [first, second].into_iter().enumerate() {
        let t = &TEMPLATES[rel];
        let question = if n == 1 && rng.random_bool(0.5) {
            (if held_out { t.follow_held_out } else { t.follow_train }).to_string()
        } else {
            let pool = if held_out { t.held_out } else { t.train };
            pool.choose(rng).expect("non-empty").replace("{team}", team)
        };
        say(question, t.answer.replace("{obj}", objects[rel]));
    }
    if rng.random_bool(0.5) {
        let (u, s) = CLOSERS.choose(rng).expect("non-empty");
        say(u.to_string(), s.to_string());
    }
    Dialogue {
        id,
        team_id: team.to_string(),
        turns,
        split: None,
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.valid + config.test >= config.dialogues {
        return Err(Error::Config("synthetic corpus needs training dialogues".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_train = config.dialogues - config.valid - config.test;
    let make = |range: std::ops::Range<usize>, split: Split, rng: &mut ChaCha8Rng| -> Vec<Dialogue> {
        range
            .map(|i| {
                let mut d = dialogue(format!("syn-{i:04}"), i % TEAMS.len(), split != Split::Train, rng);
                d.split = Some(split);
                d
            })
            .collect()
    };
    let train = make(0..n_train, Split::Train, &mut rng);
    let valid = make(n_train..n_train + config.valid, Split::Valid, &mut rng);
    let test = make(n_train + config.valid..config.dialogues, Split::Test, &mut rng);
    Ok(SyntheticCorpus {
        graphs: graphs(),
        train,
        valid,
        test,
    })
}

impl SyntheticCorpus {
    pub fn all(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Writes `<dir>/{train,valid,test}.jsonl` and `<dir>/kg/<team>.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let kg_dir = dir.join("kg");
        fs::create_dir_all(&kg_dir).map_err(|e| Error::io(&kg_dir, e))?;
        for (team, kg) in &self.graphs {
            let mut tsv = String::new();
            for t in kg.triples() {
                let _ = writeln!(tsv, "{}\t{}\t{}", t.subject, t.relation, t.object);
            }
            let path = kg_dir.join(format!("{team}.tsv"));
            fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
        }
        for (split, dialogues) in [(Split::Train, &self.train), (Split::Valid, &self.valid), (Split::Test, &self.test)] {
            write_dialogues(dir.join(format!("{}.jsonl", split.name())), dialogues)?;
        }
        Ok(())
    }
}

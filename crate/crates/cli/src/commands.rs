use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgcopy::checkpoint::Checkpoint;
use kgcopy::corpus::{link_answers, load_split, LinkRecord, Split, Vocabulary};
use kgcopy::embeddings::EmbeddingTable;
use kgcopy::evaluation::evaluate_split;
use kgcopy::kg::load_kg_dir;
use kgcopy::serving::{ChatEngine, SpanSource};
use kgcopy::synthetic::{generate, SyntheticConfig};
use kgcopy::training::{train, EpochRecord};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "kgcopy", version, about = "Knowledge-graph copy network for grounded dialogue")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Link a split against the team graphs; write examples and the audit TSV.
    Preprocess(PreprocessArgs),
    /// Train a model and write the best checkpoint and the metrics CSV.
    Train(TrainArgs),
    /// Decode a split with a checkpoint and report BLEU and entity-F1.
    Evaluate(EvaluateArgs),
    /// Interactive chat on the terminal.
    Chat(ChatArgs),
    /// Serve the JSON chat API.
    Serve(ServeArgs),
    /// Write the generated toy corpus (team graphs plus dialogues).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory of per-team graph files (`<team>.tsv`).
    #[arg(long)]
    pub kg_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the best checkpoint.
    #[arg(long, default_value = "model.json")]
    pub checkpoint: PathBuf,
    /// Per-epoch metrics; defaults to `<checkpoint>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained word vectors in text format (`N D` header line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report JSON; defaults to `<checkpoint>.<split>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub kg_dir: PathBuf,
    #[arg(long)]
    pub team: String,
    /// Print the gate value of every decoding step.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub kg_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SyntheticConfig::default().dialogues)]
    pub dialogues: usize,
    /// Held-out dialogues per evaluation split (valid and test each).
    #[arg(long, default_value_t = SyntheticConfig::default().test)]
    pub held_out: usize,
}

fn parse_split(name: &str) -> Result<Split> {
    Split::from_name(name).with_context(|| format!("unknown split {name:?}; expected train, valid or test"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => {
            let engine = load_engine(&a.checkpoint, &a.kg_dir)?;
            tokio::runtime::Runtime::new()?.block_on(crate::server::serve(engine, a.port))
        }
        Command::Synth(a) => {
            let config = SyntheticConfig {
                dialogues: a.dialogues,
                valid: a.held_out,
                test: a.held_out,
                seed: a.seed,
            };
            generate(&config)?.write(&a.out)?;
            println!("wrote synthetic corpus to {}", a.out.display());
            Ok(())
        }
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let config = RunConfig::load(a.config.as_deref())?;
    let split = parse_split(&a.split)?;
    let graphs = load_kg_dir(&a.data.kg_dir)?;
    let vocab = Vocabulary::build(&load_split(&a.data.data_dir, Split::Train)?, 1);
    let dialogues = load_split(&a.data.data_dir, split)?;
    let out = a.out.unwrap_or_else(|| a.data.data_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let examples_path = out.join(format!("{}.examples.jsonl", split.name()));
    let audit_path = out.join(format!("{}.links.tsv", split.name()));
    let mut examples = BufWriter::new(fs::File::create(&examples_path)?);
    let mut audit = BufWriter::new(fs::File::create(&audit_path)?);
    writeln!(audit, "{}", LinkRecord::tsv_header())?;

    let (mut n_examples, mut n_links, mut system_turns) = (0, 0, 0);
    let mut missing = std::collections::BTreeSet::new();
    for d in &dialogues {
        system_turns += d.system_turn_count();
        let kg = graphs.get(&d.team_id);
        if kg.is_none() && d.team_id != kgcopy::corpus::NO_TEAM {
            missing.insert(d.team_id.clone());
        }
        let (exs, links) = link_answers(d, kg, &vocab, &config.link);
        for ex in &exs {
            serde_json::to_writer(&mut examples, ex)?;
            writeln!(examples)?;
        }
        for l in &links {
            writeln!(audit, "{}", l.to_tsv())?;
        }
        n_examples += exs.len();
        n_links += links.len();
    }
    examples.flush()?;
    audit.flush()?;
    println!(
        "{}: {} dialogues, {system_turns} system turns, {n_examples} examples, {n_links} linked spans",
        split.name(),
        dialogues.len()
    );
    println!("examples: {}\naudit: {}", examples_path.display(), audit_path.display());
    if !missing.is_empty() {
        log::warn!("teams without a graph (linked against nothing): {missing:?}");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    let graphs = load_kg_dir(&a.data.kg_dir)?;
    let train_set = load_split(&a.data.data_dir, Split::Train)?;
    let valid_set = load_split(&a.data.data_dir, Split::Valid)?;
    let (dim, seed) = (config.embedding_dim, config.train.seed);
    let trained = train(&config.train, &config.link, &train_set, &valid_set, &graphs, |vocab, extra| match &a
        .embeddings
    {
        Some(path) => EmbeddingTable::load_pretrained(path, dim, vocab, extra, seed),
        None => {
            log::warn!("no --embeddings given; using seeded random word vectors");
            Ok(EmbeddingTable::random(dim, vocab, extra, seed))
        }
    })?;

    let metrics = a.metrics.unwrap_or_else(|| with_suffix(&a.checkpoint, "metrics.csv"));
    let mut csv = String::from(EpochRecord::csv_header());
    for r in &trained.outcome.history {
        csv.push('\n');
        csv.push_str(&r.to_csv());
    }
    csv.push('\n');
    write_file(&metrics, &csv)?;
    trained.checkpoint.save(&a.checkpoint)?;
    let best = &trained.outcome.best;
    println!(
        "best epoch {}: valid BLEU {:.2}, entity-F1 {:.2}\ncheckpoint: {}\nmetrics: {}",
        best.epoch,
        best.valid_bleu,
        best.valid_entity_f1,
        a.checkpoint.display(),
        metrics.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let graphs = load_kg_dir(&a.data.kg_dir)?;
    let dialogues = load_split(&a.data.data_dir, split)?;
    // guard against scoring with a checkpoint built from another corpus
    let train_path = a.data.data_dir.join(format!("{}.jsonl", Split::Train.name()));
    let corpus_hash = if train_path.exists() {
        Some(Vocabulary::build(&load_split(&a.data.data_dir, Split::Train)?, 1).hash())
    } else {
        None
    };
    let report = evaluate_split(&ckpt, split.name(), &dialogues, &graphs, corpus_hash.as_deref())?;
    let path = a.report.unwrap_or_else(|| with_suffix(&a.checkpoint, &format!("{}.report.json", split.name())));
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    println!("{report}\nreport: {}", path.display());
    Ok(())
}

fn load_engine(checkpoint: &Path, kg_dir: &Path) -> Result<ChatEngine> {
    let ckpt = Checkpoint::load(checkpoint)?;
    Ok(ChatEngine::new(ckpt, load_kg_dir(kg_dir)?)?)
}

fn chat(a: ChatArgs) -> Result<()> {
    let engine = load_engine(&a.checkpoint, &a.kg_dir)?;
    let mut session = engine.session("terminal", &a.team)?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    write!(stdout, "you> ")?;
    stdout.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if !text.is_empty() {
            let r = engine.turn(&mut session, text)?;
            if r.truncated {
                writeln!(stdout, "(input truncated to {} tokens)", engine.max_utterance_tokens)?;
            }
            writeln!(stdout, "bot> {}", r.text)?;
            let chars: Vec<char> = r.text.chars().collect();
            for s in r.spans.iter().filter(|s| s.source == SpanSource::Kg) {
                let span: String = chars[s.start..s.end].iter().collect();
                let triple = s.triple.and_then(|j| engine.graph(&a.team).map(|kg| &kg.triples()[j]));
                if let Some(t) = triple {
                    writeln!(stdout, "     [kg] {span} <- ({}, {}, {})", t.subject, t.relation, t.object)?;
                }
            }
            if a.trace {
                let gates: Vec<String> = r.gate_trace.iter().map(|g| format!("{g:.3}")).collect();
                writeln!(stdout, "     gates: {}", gates.join(" "))?;
            }
        }
        write!(stdout, "you> ")?;
        stdout.flush()?;
    }
    writeln!(stdout)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    if path.is_dir() {
        bail!("{} is a directory", path.display());
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

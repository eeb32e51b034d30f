//! Self-contained model snapshots.
//!
//! A checkpoint carries everything inference needs: parameters, the
//! vocabulary, the frozen embedding table and the configs that produced
//! them. It is stored as JSON with round-trip float formatting, so a reload
//! reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{LinkConfig, Vocabulary};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{KgCopyModel, ModelConfig, ModelParams};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub link_config: LinkConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub epoch: usize,
    pub valid_bleu: f64,
    pub valid_entity_f1: f64,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub params: ModelParams,
}

/// Hex SHA-256 over the JSON form of the training, model and linking configs.
pub fn config_hash(train: &TrainConfig, model: &ModelConfig, link: &LinkConfig) -> String {
    let json = serde_json::to_string(&(train, model, link)).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        train_config: TrainConfig,
        model: &KgCopyModel,
        params: ModelParams,
        link_config: LinkConfig,
        vocab: Vocabulary,
        table: EmbeddingTable,
        epoch: usize,
        valid_bleu: f64,
        valid_entity_f1: f64,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash: config_hash(&train_config, &model.config, &link_config),
            vocab_hash: vocab.hash(),
            model_config: model.config.clone(),
            train_config,
            link_config,
            epoch,
            valid_bleu,
            valid_entity_f1,
            vocab,
            table,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {}, expected {FORMAT_VERSION}",
                path.display(),
                ckpt.format_version
            )));
        }
        if ckpt.vocab.hash() != ckpt.vocab_hash {
            return Err(Error::Checkpoint(format!("{}: vocabulary does not match its hash", path.display())));
        }
        if ckpt.params.embedding.nrows() != ckpt.vocab.len() || ckpt.table.dim() != ckpt.model_config.d_emb {
            return Err(Error::Checkpoint(format!("{}: parameter shapes do not match", path.display())));
        }
        Ok(ckpt)
    }

    pub fn model(&self) -> KgCopyModel {
        KgCopyModel::from_parts(
            self.model_config.clone(),
            self.params.clone(),
            self.table.vocab_matrix(&self.vocab),
        )
    }

    /// Fails unless the checkpoint was trained with a vocabulary whose hash is `expected`.
    pub fn check_vocab(&self, expected: &str) -> Result<()> {
        if self.vocab_hash == expected {
            Ok(())
        } else {
            Err(Error::VocabularyMismatch {
                expected: expected.to_string(),
                found: self.vocab_hash.clone(),
            })
        }
    }
}

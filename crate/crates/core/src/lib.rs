//! KG-copy network: an encoder-decoder dialogue model that generates each
//! response token either from the training vocabulary or by copying an
//! object from the conversation's local knowledge graph.

pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod serving;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};

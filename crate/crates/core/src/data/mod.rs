pub mod dialogue;
pub mod embeddings;
pub mod features;
pub mod synthetic;
pub mod vocab;

use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

pub use dialogue::{load_dialogues, tokenize, DialogueExample, QaPair};
pub use vocab::{build_vocab, Vocabulary};

/// A dialogue with its feature matrices resident in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub example: DialogueExample,
    pub visual: Tensor,
    pub audio: Tensor,
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    load_dialogues(path)?
        .into_iter()
        .map(|example| {
            Ok(Sample {
                visual: features::load_features(&example.visual_features_ref)?,
                audio: features::load_features(&example.audio_features_ref)?,
                example,
            })
        })
        .collect()
}

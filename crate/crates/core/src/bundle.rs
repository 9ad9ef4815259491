//! On-disk layout of a trained model directory:
//! `checkpoint.dmnw`, `model.json` (configs and vocabulary) and, when
//! written by training, `metrics.jsonl`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::training::TrainConfig;

pub const CHECKPOINT: &str = "checkpoint.dmnw";
pub const MODEL_JSON: &str = "model.json";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
}

pub struct Bundle {
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&self.store, &dir.join(CHECKPOINT))?;
        let manifest = Manifest {
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        fs::write(dir.join(MODEL_JSON), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Bundle> {
        let path = dir.join(MODEL_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::Resolution {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let vocab = Vocabulary::from_tokens(manifest.vocab)?;
        if vocab.len() != manifest.model.vocab_size {
            return Err(Error::Format(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                manifest.model.vocab_size
            )));
        }
        let (model, mut store) = Model::new(manifest.model, manifest.train.seed)?;
        store.load_from(&checkpoint::load(&dir.join(CHECKPOINT))?)?;
        Ok(Bundle {
            model,
            store,
            vocab,
            train: manifest.train,
        })
    }
}

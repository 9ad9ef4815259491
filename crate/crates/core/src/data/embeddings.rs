//! Pretrained word vectors in whitespace-separated text form:
//! one `token v1 ... v_dim` entry per line.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::vocab::{Vocabulary, RESERVED};
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingCoverage {
    /// Non-reserved vocabulary tokens found in the file.
    pub found: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Overwrite rows of `table` for vocabulary tokens present in `text`.
/// Absent tokens keep their current values.
pub fn apply_embeddings(
    text: &str,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    store: &mut ParamStore,
) -> Result<EmbeddingCoverage> {
    let dim = table.dim;
    let mut seen = vec![false; vocab.len()];
    let weights = store.value_mut(table.weights);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Line {
                line: line_no,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Line {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if vocab.token(id) != token || id >= table.vocab_size {
            continue;
        }
        weights.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        seen[id] = true;
    }
    let total = vocab.len().saturating_sub(RESERVED.len());
    let found = seen.iter().skip(RESERVED.len()).filter(|&&s| s).count();
    Ok(EmbeddingCoverage {
        found,
        total,
        fraction: if total == 0 { 0.0 } else { found as f64 / total as f64 },
    })
}

pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    store: &mut ParamStore,
) -> Result<EmbeddingCoverage> {
    let text = fs::read_to_string(path).map_err(|e| Error::Resolution {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    apply_embeddings(&text, vocab, table, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocabulary, EmbeddingTable, ParamStore) {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(["cat", "dog"].map(String::from));
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table =
            EmbeddingTable::new(&mut ParamBuilder::new(&mut store, &mut rng, 0.1), vocab.len(), 3)
                .unwrap();
        (vocab, table, store)
    }

    #[test]
    fn no_overlap_leaves_table_unchanged() {
        let (vocab, table, mut store) = setup();
        let before = store.value(table.weights).clone();
        let cov = apply_embeddings("fish 1 2 3\n", &vocab, &table, &mut store).unwrap();
        assert_eq!(cov.fraction, 0.0);
        assert_eq!(store.value(table.weights), &before);
    }

    #[test]
    fn one_token_row_matches_file() {
        let (vocab, table, mut store) = setup();
        let cov = apply_embeddings("dog 0.25 -1.5 3\n", &vocab, &table, &mut store).unwrap();
        assert_eq!(cov.found, 1);
        assert_eq!(cov.fraction, 0.5);
        assert_eq!(store.value(table.weights).row(vocab.id("dog")), &[0.25, -1.5, 3.0]);
    }

    #[test]
    fn malformed_line_is_named() {
        let (vocab, table, mut store) = setup();
        let text = "a 1 2 3\nb 1 2 3\nc 1 2 3\nd 1 2 3\ne 1 2 3\nf 1 2 3\ng 1 2\n";
        match apply_embeddings(text, &vocab, &table, &mut store) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}

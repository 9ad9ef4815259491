//! Corpus-level BLEU with a single reference per candidate.
//!
//! Modified n-gram precisions are clipped by reference counts and pooled
//! over the corpus. For n ≥ 2 a zero precision is replaced by
//! `(matches + 1) / (total + 1)`; unigram precision is never smoothed. The
//! brevity penalty is `exp(1 − r/c)` when `c < r`.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const SMOOTHING: &str = "add1-zero-only";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub bleu4: Option<f64>,
    /// Smoothed modified precisions `p_1..p_max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
    pub smoothing: &'static str,
}

impl BleuReport {
    pub fn score(&self, n: usize) -> Option<f64> {
        match n {
            1 => self.bleu1,
            2 => self.bleu2,
            3 => self.bleu3,
            4 => self.bleu4,
            _ => None,
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one sentence pair.
pub fn clipped_counts<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

pub fn bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    max_n: usize,
) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Input(format!("max_n must be in 1..=4, got {max_n}")));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (mut matches, mut total) = (0, 0);
        for (cand, reference) in candidates.iter().zip(references) {
            let (m, t) = clipped_counts(cand, reference, n);
            matches += m;
            total += t;
        }
        let p = if n >= 2 && matches == 0 {
            1.0 / (total as f64 + 1.0)
        } else if total == 0 {
            0.0
        } else {
            matches as f64 / total as f64
        };
        precisions.push(p);
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut scores = [None; 4];
    for n in 1..=max_n {
        let ps = &precisions[..n];
        scores[n - 1] = Some(if ps.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            brevity_penalty * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
        });
    }
    Ok(BleuReport {
        bleu1: scores[0],
        bleu2: scores[1],
        bleu3: scores[2],
        bleu4: scores[3],
        precisions,
        brevity_penalty,
        candidate_tokens: c,
        reference_tokens: r,
        smoothing: SMOOTHING,
    })
}

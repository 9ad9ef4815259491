//! Answer decoder: an LSTM fed `[s_prev ; v ; embed(y_prev)]`, where `s_prev`
//! is the terminal hidden state of the previous answer in the dialogue.

use std::cmp::Ordering;

use crate::data::vocab::{BOS, EOS};
use crate::encoders::{EmbeddingTable, LstmCell};
use crate::error::{Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::tensor::{log_softmax_slice, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub step: usize,
}

/// Link to the previous answer of the same dialogue.
#[derive(Clone, Copy, Debug)]
pub struct ChainState {
    pub s_prev_final: Var,
    /// 1-based position of the question being answered.
    pub question_index: usize,
}

impl ChainState {
    /// Chain for the first question of a dialogue: a zero vector.
    pub fn first(tape: &mut Tape<'_>, hidden: usize) -> Self {
        ChainState {
            s_prev_final: tape.constant(Tensor::zeros(&[hidden])),
            question_index: 1,
        }
    }

    pub fn next(&self, final_state: &DecoderState) -> Self {
        ChainState {
            s_prev_final: final_state.h,
            question_index: self.question_index + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cell: LstmCell,
    pub out: Linear,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl Decoder {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        hidden: usize,
        embed_dim: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(Decoder {
            cell: LstmCell::new(&mut b.sub("cell"), 2 * hidden + embed_dim, hidden)?,
            out: Linear::new(&mut b.sub("out"), hidden, vocab_size)?,
            hidden,
            vocab_size,
        })
    }

    pub fn initial_state(&self, tape: &mut Tape<'_>) -> DecoderState {
        let (h, c) = self.cell.zero_state(tape);
        DecoderState { h, c, step: 0 }
    }

    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        state: &DecoderState,
        chain: &ChainState,
        v: Var,
        y_prev: usize,
    ) -> Result<(DecoderState, Var)> {
        if y_prev >= self.vocab_size {
            return Err(Error::Input(format!(
                "token {y_prev} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let y = embed.lookup(tape, y_prev)?;
        let x = tape.concat(&[chain.s_prev_final, v, y], 0)?;
        let (h, c) = self.cell.step(tape, x, state.h, state.c)?;
        let logits = self.out.forward(tape, h)?;
        Ok((
            DecoderState {
                h,
                c,
                step: state.step + 1,
            },
            logits,
        ))
    }

    /// Unroll over `BOS y_1 … y_K EOS`; returns one logits row per predicted token.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        chain: &ChainState,
        v: Var,
        target: &[usize],
    ) -> Result<(Vec<Var>, DecoderState)> {
        if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
            return Err(Error::Input(format!(
                "target must start with BOS and end with EOS, got {target:?}"
            )));
        }
        let mut state = self.initial_state(tape);
        let mut logits = Vec::with_capacity(target.len() - 1);
        for &y in &target[..target.len() - 1] {
            let (next, l) = self.decode_step(tape, embed, &state, chain, v, y)?;
            state = next;
            logits.push(l);
        }
        Ok((logits, state))
    }

    /// Total log-probability of `tokens` (generated tokens, without BOS).
    pub fn score_sequence(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        chain: &ChainState,
        v: Var,
        tokens: &[usize],
    ) -> Result<f64> {
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut total = 0.0;
        for &tok in tokens {
            let (next, logits) = self.decode_step(tape, embed, &state, chain, v, prev)?;
            total += log_softmax_slice(tape.value(logits).data())[tok];
            state = next;
            prev = tok;
        }
        Ok(total)
    }

    pub fn greedy(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        chain: &ChainState,
        v: Var,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (next, logits) = self.decode_step(tape, embed, &state, chain, v, prev)?;
            let tok = argmax(tape.value(logits).data());
            out.push(tok);
            if tok == EOS {
                break;
            }
            state = next;
            prev = tok;
        }
        Ok(out)
    }

    pub fn beam_search(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        chain: &ChainState,
        v: Var,
        width: usize,
        max_len: usize,
    ) -> Result<Hypothesis> {
        Ok(self
            .beam_search_traced(tape, embed, chain, v, width, max_len)?
            .0)
    }

    /// Beam search that also returns the beam after every step.
    pub fn beam_search_traced(
        &self,
        tape: &mut Tape<'_>,
        embed: &EmbeddingTable,
        chain: &ChainState,
        v: Var,
        width: usize,
        max_len: usize,
    ) -> Result<(Hypothesis, Vec<Beam>)> {
        if width == 0 || max_len == 0 {
            return Err(Error::Config("beam width and max_len must be positive".into()));
        }
        let start = self.initial_state(tape);
        let mut active = vec![Partial {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: start,
        }];
        let mut completed: Vec<Hypothesis> = Vec::new();
        let mut trace = Vec::new();

        for step in 1..=max_len {
            let mut candidates = Vec::with_capacity(active.len() * self.vocab_size);
            for hyp in &active {
                let prev = hyp.tokens.last().copied().unwrap_or(BOS);
                let (next, logits) = self.decode_step(tape, embed, &hyp.state, chain, v, prev)?;
                let logp = log_softmax_slice(tape.value(logits).data());
                for (tok, lp) in logp.into_iter().enumerate() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Partial {
                        tokens,
                        log_prob: hyp.log_prob + lp,
                        state: next,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.log_prob
                    .partial_cmp(&a.log_prob)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            trace.push(Beam {
                width,
                hypotheses: candidates
                    .iter()
                    .map(|c| (c.tokens.clone(), c.log_prob))
                    .collect(),
            });

            active.clear();
            for c in candidates {
                if c.tokens.last() == Some(&EOS) || step == max_len {
                    completed.push(Hypothesis {
                        normalized: c.log_prob / c.tokens.len() as f64,
                        log_prob: c.log_prob,
                        tokens: c.tokens,
                        completed_at: step,
                    });
                } else {
                    active.push(c);
                }
            }
            if active.is_empty() {
                break;
            }
        }

        let best = completed
            .into_iter()
            .min_by(|a, b| a.rank_cmp(b))
            .expect("beam search completes at least one hypothesis");
        Ok((best, trace))
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

struct Partial {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam contents after one step, sorted by descending log-probability.
#[derive(Clone, Debug)]
pub struct Beam {
    pub width: usize,
    pub hypotheses: Vec<(Vec<usize>, f64)>,
}

/// A finished beam hypothesis. `tokens` excludes BOS and includes EOS when
/// the hypothesis terminated before `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub normalized: f64,
    pub completed_at: usize,
}

impl Hypothesis {
    /// Ordering used to pick the winner: higher normalized score, then
    /// earlier completion, then the lexicographically smaller sequence.
    pub fn rank_cmp(&self, other: &Hypothesis) -> Ordering {
        other
            .normalized
            .partial_cmp(&self.normalized)
            .unwrap_or(Ordering::Equal)
            .then(self.completed_at.cmp(&other.completed_at))
            .then_with(|| self.tokens.cmp(&other.tokens))
    }

    /// Generated tokens with the trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

//! Input module: word embeddings, the bidirectional question encoder, and
//! the recurrent encoders that turn segment features and caption/summary
//! text into per-position states.

use serde::{Deserialize, Serialize};

use crate::data::vocab::UNK;
use crate::error::{Error, Result};
use crate::layers::ParamBuilder;
use crate::params::ParamId;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(b: &mut ParamBuilder<'_>, vocab_size: usize, dim: usize) -> Result<Self> {
        Ok(EmbeddingTable {
            weights: b.tensor("weight", &[vocab_size, dim])?,
            vocab_size,
            dim,
        })
    }

    /// Embedding row for `token`; ids outside the table read the UNK row.
    pub fn lookup(&self, tape: &mut Tape<'_>, token: usize) -> Result<Var> {
        let id = if token < self.vocab_size { token } else { UNK };
        let w = tape.param(self.weights);
        tape.row(w, id)
    }
}

/// LSTM cell with the four gates stacked in `(input, forget, candidate, output)` order.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            w_x: b.tensor("w_x", &[4 * hidden, input])?,
            w_h: b.tensor("w_h", &[4 * hidden, hidden])?,
            bias: b.tensor("bias", &[4 * hidden])?,
            input,
            hidden,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(&[self.hidden]));
        let c = tape.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    /// One recurrence step; returns `(h', c')`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        if tape.shape(x) != [self.input] || tape.shape(h) != [hs] || tape.shape(c) != [hs] {
            return Err(Error::Dimension(format!(
                "lstm cell ({} -> {hs}) given x {:?}, h {:?}, c {:?}",
                self.input,
                tape.shape(x),
                tape.shape(h),
                tape.shape(c)
            )));
        }
        let w_x = tape.param(self.w_x);
        let w_h = tape.param(self.w_h);
        let bias = tape.param(self.bias);
        let wx = tape.matvec(w_x, x)?;
        let wh = tape.matvec(w_h, h)?;
        let pre = tape.add(wx, wh)?;
        let pre = tape.add(pre, bias)?;

        let i = tape.slice(pre, 0, hs)?;
        let f = tape.slice(pre, hs, hs)?;
        let g = tape.slice(pre, 2 * hs, hs)?;
        let o = tape.slice(pre, 3 * hs, hs)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;

        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Free-function form of [`LstmCell::step`].
pub fn lstm_cell(
    tape: &mut Tape<'_>,
    x: Var,
    h: Var,
    c: Var,
    params: &LstmCell,
) -> Result<(Var, Var)> {
    params.step(tape, x, h, c)
}

/// Concatenated terminal cell states of the forward and backward passes, `[2·hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct QuestionEmbedding {
    pub q: Var,
    pub forward_cell: Var,
    pub backward_cell: Var,
}

#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl QuestionEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        Ok(QuestionEncoder {
            forward: LstmCell::new(&mut b.sub("forward"), input, hidden)?,
            backward: LstmCell::new(&mut b.sub("backward"), input, hidden)?,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        table: &EmbeddingTable,
    ) -> Result<QuestionEmbedding> {
        if tokens.is_empty() {
            return Err(Error::Input("question has no tokens".into()));
        }
        let embedded = tokens
            .iter()
            .map(|&t| table.lookup(tape, t))
            .collect::<Result<Vec<_>>>()?;

        let (mut h, mut c) = self.forward.zero_state(tape);
        for &x in &embedded {
            (h, c) = self.forward.step(tape, x, h, c)?;
        }
        let forward_cell = c;

        let (mut h, mut c) = self.backward.zero_state(tape);
        for &x in embedded.iter().rev() {
            (h, c) = self.backward.step(tape, x, h, c)?;
        }
        let backward_cell = c;

        let q = tape.concat(&[forward_cell, backward_cell], 0)?;
        Ok(QuestionEmbedding {
            q,
            forward_cell,
            backward_cell,
        })
    }
}

/// Encoded segment features of one modality: `facts` is `[N × hidden]`,
/// `rows[i]` is fact `i` as a vector.
#[derive(Clone, Debug)]
pub struct InputFacts {
    pub modality: Modality,
    pub facts: Var,
    pub rows: Vec<Var>,
}

impl InputFacts {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Unidirectional LSTM over per-segment features.
#[derive(Clone, Debug)]
pub struct FactEncoder {
    pub modality: Modality,
    pub cell: LstmCell,
}

impl FactEncoder {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        modality: Modality,
        feat_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FactEncoder {
            modality,
            cell: LstmCell::new(&mut b.sub("cell"), feat_dim, hidden)?,
        })
    }

    /// `features` is `[N × feat_dim]`.
    pub fn encode(&self, tape: &mut Tape<'_>, features: Var) -> Result<InputFacts> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.cell.input {
            return Err(Error::Dimension(format!(
                "{} features must be [N × {}], got {shape:?}",
                self.modality.name(),
                self.cell.input
            )));
        }
        let (mut h, mut c) = self.cell.zero_state(tape);
        let mut rows = Vec::with_capacity(shape[0]);
        for i in 0..shape[0] {
            let x = tape.row(features, i)?;
            (h, c) = self.cell.step(tape, x, h, c)?;
            rows.push(h);
        }
        if rows.is_empty() {
            return Err(Error::Input("no segments to encode".into()));
        }
        let facts = tape.stack_rows(&rows)?;
        Ok(InputFacts {
            modality: self.modality,
            facts,
            rows,
        })
    }
}

/// Per-token recurrent states of a caption or summary, `[L × hidden]`.
#[derive(Clone, Debug)]
pub struct TextStates {
    pub states: Var,
    pub rows: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cell: LstmCell,
}

impl TextEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        Ok(TextEncoder {
            cell: LstmCell::new(&mut b.sub("cell"), input, hidden)?,
        })
    }

    /// Empty text yields a single zero state.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        table: &EmbeddingTable,
    ) -> Result<TextStates> {
        if tokens.is_empty() {
            let zero = tape.constant(Tensor::zeros(&[self.cell.hidden]));
            let states = tape.stack_rows(&[zero])?;
            return Ok(TextStates {
                states,
                rows: vec![zero],
            });
        }
        let (mut h, mut c) = self.cell.zero_state(tape);
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let x = table.lookup(tape, t)?;
            (h, c) = self.cell.step(tape, x, h, c)?;
            rows.push(h);
        }
        let states = tape.stack_rows(&rows)?;
        Ok(TextStates { states, rows })
    }
}

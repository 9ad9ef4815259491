//! Additive soft attention over caption/summary token states.

use serde::{Deserialize, Serialize};

use crate::encoders::TextStates;
use crate::error::{Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Caption,
    Summary,
}

#[derive(Clone, Copy, Debug)]
pub struct TextContext {
    pub source: TextSource,
    /// Attention weights over tokens, `[L]`.
    pub alpha: Var,
    /// Weighted sum of token states, `[hidden]`.
    pub context: Var,
}

/// `e_j = w · tanh(W₁ t_j + b₁ + W₂ q + b₂) + b`, `α = softmax(e)`.
#[derive(Clone, Debug)]
pub struct TextAttention {
    pub source: TextSource,
    pub key: Linear,
    pub query: Linear,
    pub score: Linear,
}

impl TextAttention {
    pub fn new(b: &mut ParamBuilder<'_>, source: TextSource, hidden: usize) -> Result<Self> {
        Ok(TextAttention {
            source,
            key: Linear::new(&mut b.sub("key"), hidden, hidden)?,
            query: Linear::new(&mut b.sub("query"), hidden, hidden)?,
            score: Linear::new(&mut b.sub("score"), hidden, 1)?,
        })
    }

    pub fn attend(&self, tape: &mut Tape<'_>, text: &TextStates, q: Var) -> Result<TextContext> {
        let hidden = self.key.input;
        if tape.shape(q) != [hidden] {
            return Err(Error::Dimension(format!(
                "text attention query must be [{hidden}], got {:?}",
                tape.shape(q)
            )));
        }
        if let Some(&r) = text.rows.iter().find(|&&r| tape.shape(r) != [hidden]) {
            return Err(Error::Dimension(format!(
                "text state {:?} does not match query [{hidden}]",
                tape.shape(r)
            )));
        }
        let query = self.query.forward(tape, q)?;
        let scores = text
            .rows
            .iter()
            .map(|&t| {
                let key = self.key.forward(tape, t)?;
                let joint = tape.add(key, query)?;
                let act = tape.tanh(joint)?;
                self.score.forward(tape, act)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = tape.concat(&scores, 0)?;
        let alpha = tape.softmax(e, 0)?;
        let len = text.rows.len();
        let weights = tape.reshape(alpha, &[1, len])?;
        let ctx = tape.matmul(weights, text.states)?;
        let context = tape.reshape(ctx, &[hidden])?;
        Ok(TextContext {
            source: self.source,
            alpha,
            context,
        })
    }
}

/// Free-function form of [`TextAttention::attend`].
pub fn text_attend(
    tape: &mut Tape<'_>,
    text: &TextStates,
    q: Var,
    params: &TextAttention,
) -> Result<TextContext> {
    params.attend(tape, text, q)
}

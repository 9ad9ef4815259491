//! Attention export: text attention, per-episode gates and fusion weights
//! for every turn of every dialogue.

use serde::Serialize;

use crate::data::vocab::Vocabulary;
use crate::episodic::DmnOutput;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedDialogue};
use crate::params::ParamStore;
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize)]
pub struct TurnAttention {
    pub question: Vec<String>,
    pub caption_alpha: Vec<f64>,
    pub summary_alpha: Vec<f64>,
    /// One distribution per episode.
    pub visual_gates: Vec<Vec<f64>>,
    pub audio_gates: Vec<Vec<f64>>,
    /// Literal fusion: `[modality][dimension]`, each column a distribution.
    /// Question-gated fusion: a single row with one weight per modality.
    pub fusion_beta: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DialogueAttention {
    pub id: String,
    pub turns: Vec<TurnAttention>,
}

pub fn dump_dialogue(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocabulary,
    dialogue: &PreparedDialogue,
    chain: bool,
) -> Result<DialogueAttention> {
    let mut tape = Tape::with_params(store);
    let outputs = model.forward_dialogue(&mut tape, dialogue, chain)?;
    let gates = |d: &DmnOutput| -> Vec<Vec<f64>> {
        d.gates.iter().map(|g| tape.value(g.g).data().to_vec()).collect()
    };
    let turns = outputs
        .iter()
        .zip(&dialogue.turns)
        .map(|(o, turn)| {
            let beta = tape.value(o.context.fusion.beta);
            let fusion_beta = if beta.rank() == 2 {
                (0..beta.rows()).map(|j| beta.row(j).to_vec()).collect()
            } else {
                vec![beta.data().to_vec()]
            };
            TurnAttention {
                question: turn.question.iter().map(|&t| vocab.token(t).to_string()).collect(),
                caption_alpha: tape.value(o.context.caption.alpha).data().to_vec(),
                summary_alpha: tape.value(o.context.summary.alpha).data().to_vec(),
                visual_gates: gates(&o.context.visual),
                audio_gates: gates(&o.context.audio),
                fusion_beta,
            }
        })
        .collect();
    Ok(DialogueAttention {
        id: dialogue.id.clone(),
        turns,
    })
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Verify that every exported distribution sums to one within 1e-9.
pub fn validate(dump: &DialogueAttention) -> Result<()> {
    for t in &dump.turns {
        check_distribution("caption attention", &t.caption_alpha)?;
        check_distribution("summary attention", &t.summary_alpha)?;
        for g in t.visual_gates.iter().chain(&t.audio_gates) {
            check_distribution("gate distribution", g)?;
        }
        if t.fusion_beta.len() == 1 {
            check_distribution("fusion weights", &t.fusion_beta[0])?;
        } else {
            let dims = t.fusion_beta.first().map_or(0, Vec::len);
            for k in 0..dims {
                let col: Vec<f64> = t.fusion_beta.iter().map(|r| r[k]).collect();
                check_distribution("fusion weights", &col)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::gradcheck::{pipeline_instance, PIPE_EPISODES, PIPE_FEAT, PIPE_VOCAB};
    use crate::model::ModelConfig;

    #[test]
    fn exported_distributions_are_normalised() {
        for fusion in [FusionMode::Literal, FusionMode::QuestionGated] {
            let cfg = ModelConfig {
                vocab_size: PIPE_VOCAB,
                embed_dim: 6,
                hidden: 8,
                visual_dim: PIPE_FEAT,
                audio_dim: PIPE_FEAT,
                episodes: PIPE_EPISODES,
                fusion,
            };
            let (model, store) = Model::new(cfg, 3).unwrap();
            let d = pipeline_instance(3);
            let dump = dump_dialogue(&model, &store, &Vocabulary::default(), &d, true).unwrap();
            assert_eq!(dump.turns.len(), 2);
            assert_eq!(dump.turns[0].visual_gates.len(), PIPE_EPISODES);
            validate(&dump).unwrap();
        }
    }
}

//! The full network: encoders, text attention, one episodic memory per
//! modality, fusion and the chained answer decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{TextAttention, TextContext, TextSource};
use crate::data::vocab::{Vocabulary, EOS};
use crate::data::Sample;
use crate::decoder::{argmax, ChainState, Decoder, DecoderState, Hypothesis};
use crate::encoders::{
    EmbeddingTable, FactEncoder, InputFacts, Modality, QuestionEncoder, TextEncoder, TextStates,
};
use crate::episodic::{DmnOutput, EpisodicMemory};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode, FusionResult, QuestionGatedFusion};
use crate::layers::{Linear, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub episodes: usize,
    #[serde(default)]
    pub fusion: FusionMode,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: EmbeddingTable,
    pub question: QuestionEncoder,
    /// Maps the `2·hidden` question embedding down to `hidden`.
    pub q_proj: Linear,
    pub caption_encoder: TextEncoder,
    pub summary_encoder: TextEncoder,
    pub caption_attention: TextAttention,
    pub summary_attention: TextAttention,
    pub visual_encoder: FactEncoder,
    pub audio_encoder: FactEncoder,
    pub visual_memory: EpisodicMemory,
    pub audio_memory: EpisodicMemory,
    pub gated_fusion: Option<QuestionGatedFusion>,
    pub decoder: Decoder,
}

/// Token ids for one QA turn; `target` is framed as `BOS … EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTurn {
    pub question: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDialogue {
    pub id: String,
    pub caption: Vec<usize>,
    pub summary: Vec<usize>,
    pub turns: Vec<PreparedTurn>,
    pub visual: crate::tensor::Tensor,
    pub audio: crate::tensor::Tensor,
}

impl PreparedDialogue {
    pub fn new(sample: &Sample, vocab: &Vocabulary) -> Self {
        let ex = &sample.example;
        PreparedDialogue {
            id: ex.id.clone(),
            caption: vocab.ids(&ex.caption),
            summary: vocab.ids(&ex.summary),
            turns: ex
                .qa_pairs
                .iter()
                .map(|qa| PreparedTurn {
                    question: vocab.ids(&qa.question),
                    target: vocab.framed(&qa.answer),
                })
                .collect(),
            visual: sample.visual.clone(),
            audio: sample.audio.clone(),
        }
    }
}

pub fn prepare_all(samples: &[Sample], vocab: &Vocabulary) -> Vec<PreparedDialogue> {
    samples.iter().map(|s| PreparedDialogue::new(s, vocab)).collect()
}

/// Encodings shared by every turn of a dialogue.
#[derive(Clone, Debug)]
pub struct DialogueContext {
    pub visual: InputFacts,
    pub audio: InputFacts,
    pub caption: TextStates,
    pub summary: TextStates,
}

/// Everything computed for one question before decoding.
#[derive(Clone, Debug)]
pub struct TurnContext {
    pub q: Var,
    pub visual: DmnOutput,
    pub audio: DmnOutput,
    pub caption: TextContext,
    pub summary: TextContext,
    pub fusion: FusionResult,
}

#[derive(Clone, Debug)]
pub struct TurnOutput {
    pub context: TurnContext,
    pub chain: ChainState,
    pub logits: Vec<Var>,
    pub final_state: DecoderState,
}

impl Model {
    /// Build a model with uniform `[-1/√hidden, 1/√hidden]` initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        let h = config.hidden;
        if h == 0 || config.embed_dim == 0 || config.visual_dim == 0 || config.audio_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, 1.0 / (h as f64).sqrt());
        let e = config.embed_dim;
        let model = Model {
            embed: EmbeddingTable::new(&mut b.sub("embed"), config.vocab_size, e)?,
            question: QuestionEncoder::new(&mut b.sub("question"), e, h)?,
            q_proj: Linear::new(&mut b.sub("q_proj"), 2 * h, h)?,
            caption_encoder: TextEncoder::new(&mut b.sub("caption_encoder"), e, h)?,
            summary_encoder: TextEncoder::new(&mut b.sub("summary_encoder"), e, h)?,
            caption_attention: TextAttention::new(
                &mut b.sub("caption_attention"),
                TextSource::Caption,
                h,
            )?,
            summary_attention: TextAttention::new(
                &mut b.sub("summary_attention"),
                TextSource::Summary,
                h,
            )?,
            visual_encoder: FactEncoder::new(
                &mut b.sub("visual_encoder"),
                Modality::Visual,
                config.visual_dim,
                h,
            )?,
            audio_encoder: FactEncoder::new(
                &mut b.sub("audio_encoder"),
                Modality::Audio,
                config.audio_dim,
                h,
            )?,
            visual_memory: EpisodicMemory::new(
                &mut b.sub("visual_memory"),
                Modality::Visual,
                h,
                config.episodes,
            )?,
            audio_memory: EpisodicMemory::new(
                &mut b.sub("audio_memory"),
                Modality::Audio,
                h,
                config.episodes,
            )?,
            gated_fusion: match config.fusion {
                FusionMode::Literal => None,
                FusionMode::QuestionGated => {
                    Some(QuestionGatedFusion::new(&mut b.sub("fusion"), h)?)
                }
            },
            decoder: Decoder::new(&mut b.sub("decoder"), h, e, config.vocab_size)?,
            config,
        };
        Ok((model, store))
    }

    pub fn encode_context(
        &self,
        tape: &mut Tape<'_>,
        dialogue: &PreparedDialogue,
    ) -> Result<DialogueContext> {
        let vf = tape.constant(dialogue.visual.clone());
        let af = tape.constant(dialogue.audio.clone());
        Ok(DialogueContext {
            visual: self.visual_encoder.encode(tape, vf)?,
            audio: self.audio_encoder.encode(tape, af)?,
            caption: self.caption_encoder.encode(tape, &dialogue.caption, &self.embed)?,
            summary: self.summary_encoder.encode(tape, &dialogue.summary, &self.embed)?,
        })
    }

    pub fn turn_context(
        &self,
        tape: &mut Tape<'_>,
        ctx: &DialogueContext,
        question: &[usize],
    ) -> Result<TurnContext> {
        let qe = self.question.encode(tape, question, &self.embed)?;
        let q = self.q_proj.forward(tape, qe.q)?;
        let visual = self.visual_memory.run(tape, &ctx.visual, q)?;
        let audio = self.audio_memory.run(tape, &ctx.audio, q)?;
        let caption = self.caption_attention.attend(tape, &ctx.caption, q)?;
        let summary = self.summary_attention.attend(tape, &ctx.summary, q)?;
        let contexts = [visual.memory, audio.memory, caption.context, summary.context];
        let fusion = match &self.gated_fusion {
            None => fuse(tape, &contexts)?,
            Some(g) => g.fuse(tape, &contexts, q)?,
        };
        Ok(TurnContext {
            q,
            visual,
            audio,
            caption,
            summary,
            fusion,
        })
    }

    /// Teacher-forced pass over every turn. With `chain` off, each turn
    /// sees a zero previous-answer state.
    pub fn forward_dialogue(
        &self,
        tape: &mut Tape<'_>,
        dialogue: &PreparedDialogue,
        chain: bool,
    ) -> Result<Vec<TurnOutput>> {
        self.forward_turns(tape, dialogue, dialogue.turns.len(), chain)
    }

    /// Teacher-forced pass over the first `count` turns.
    pub fn forward_turns(
        &self,
        tape: &mut Tape<'_>,
        dialogue: &PreparedDialogue,
        count: usize,
        chain: bool,
    ) -> Result<Vec<TurnOutput>> {
        if count > dialogue.turns.len() {
            return Err(Error::Input(format!(
                "dialogue `{}` has {} turns, {count} requested",
                dialogue.id,
                dialogue.turns.len()
            )));
        }
        let ctx = self.encode_context(tape, dialogue)?;
        let mut link = ChainState::first(tape, self.config.hidden);
        let mut out = Vec::with_capacity(count);
        for turn in &dialogue.turns[..count] {
            let context = self.turn_context(tape, &ctx, &turn.question)?;
            let (logits, final_state) = self.decoder.decode_teacher_forced(
                tape,
                &self.embed,
                &link,
                context.fusion.v,
                &turn.target,
            )?;
            let this_link = link;
            link = if chain {
                link.next(&final_state)
            } else {
                ChainState {
                    question_index: link.question_index + 1,
                    ..ChainState::first(tape, self.config.hidden)
                }
            };
            out.push(TurnOutput {
                context,
                chain: this_link,
                logits,
                final_state,
            });
        }
        Ok(out)
    }

    /// Answer the final question of `dialogue` with beam search, chaining
    /// through teacher-forced decoding of the earlier gold answers.
    pub fn generate(
        &self,
        store: &ParamStore,
        dialogue: &PreparedDialogue,
        width: usize,
        max_len: usize,
    ) -> Result<Hypothesis> {
        let mut tape = Tape::with_params(store);
        let ctx = self.encode_context(&mut tape, dialogue)?;
        let (last, history) = dialogue
            .turns
            .split_last()
            .ok_or_else(|| Error::Input(format!("dialogue `{}` has no turns", dialogue.id)))?;
        let mut link = ChainState::first(&mut tape, self.config.hidden);
        for turn in history {
            let c = self.turn_context(&mut tape, &ctx, &turn.question)?;
            let (_, final_state) = self.decoder.decode_teacher_forced(
                &mut tape,
                &self.embed,
                &link,
                c.fusion.v,
                &turn.target,
            )?;
            link = link.next(&final_state);
        }
        let c = self.turn_context(&mut tape, &ctx, &last.question)?;
        self.decoder
            .beam_search(&mut tape, &self.embed, &link, c.fusion.v, width, max_len)
    }
}

/// Per-turn evaluation record from a teacher-forced pass.
#[derive(Clone, Debug, Serialize)]
pub struct TurnRecord {
    pub dialogue: usize,
    pub turn: usize,
    /// Argmax prediction at each answer position (EOS position excluded
    /// unless the answer is empty).
    pub predicted: Vec<usize>,
    pub gold: Vec<usize>,
    /// Gate distributions per episode.
    pub visual_gates: Vec<Vec<f64>>,
    pub audio_gates: Vec<Vec<f64>>,
}

impl TurnRecord {
    pub fn correct(&self) -> usize {
        self.predicted
            .iter()
            .zip(&self.gold)
            .filter(|(a, b)| a == b)
            .count()
    }

    pub fn exact(&self) -> bool {
        self.predicted == self.gold
    }
}

pub fn gate_entropy(g: &[f64]) -> f64 {
    -g.iter().map(|&x| x * (x + 1e-12).ln()).sum::<f64>()
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalSummary {
    pub token_accuracy: f64,
    pub tokens: usize,
    pub mean_gate_entropy: f64,
}

pub fn summarize(records: &[TurnRecord]) -> EvalSummary {
    let tokens: usize = records.iter().map(|r| r.gold.len()).sum();
    let correct: usize = records.iter().map(TurnRecord::correct).sum();
    let gates: Vec<f64> = records
        .iter()
        .flat_map(|r| r.visual_gates.iter().chain(&r.audio_gates))
        .map(|g| gate_entropy(g))
        .collect();
    EvalSummary {
        token_accuracy: if tokens == 0 { 0.0 } else { correct as f64 / tokens as f64 },
        tokens,
        mean_gate_entropy: if gates.is_empty() {
            0.0
        } else {
            gates.iter().sum::<f64>() / gates.len() as f64
        },
    }
}

impl Model {
    pub fn evaluate_dialogue(
        &self,
        store: &ParamStore,
        dialogue: &PreparedDialogue,
        index: usize,
        chain: bool,
    ) -> Result<Vec<TurnRecord>> {
        let mut tape = Tape::with_params(store);
        let outputs = self.forward_dialogue(&mut tape, dialogue, chain)?;
        let gates = |tape: &Tape<'_>, d: &DmnOutput| -> Vec<Vec<f64>> {
            d.gates.iter().map(|g| tape.value(g.g).data().to_vec()).collect()
        };
        Ok(outputs
            .iter()
            .zip(&dialogue.turns)
            .enumerate()
            .map(|(t, (o, turn))| {
                let gold_all = &turn.target[1..];
                let positions = if gold_all.len() > 1 {
                    gold_all.len() - 1
                } else {
                    gold_all.len()
                };
                TurnRecord {
                    dialogue: index,
                    turn: t,
                    predicted: o.logits[..positions]
                        .iter()
                        .map(|&l| argmax(tape.value(l).data()))
                        .collect(),
                    gold: gold_all[..positions].to_vec(),
                    visual_gates: gates(&tape, &o.context.visual),
                    audio_gates: gates(&tape, &o.context.audio),
                }
            })
            .collect())
    }

    /// Teacher-forced evaluation of every dialogue, in parallel, in input order.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        dialogues: &[PreparedDialogue],
        chain: bool,
    ) -> Result<Vec<TurnRecord>> {
        let per: Vec<Vec<TurnRecord>> = dialogues
            .par_iter()
            .enumerate()
            .map(|(i, d)| self.evaluate_dialogue(store, d, i, chain))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }
}

/// Strip a trailing EOS and map ids back to tokens.
pub fn detokenize(vocab: &Vocabulary, tokens: &[usize]) -> Vec<String> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .map(|&t| vocab.token(t).to_string())
        .collect()
}

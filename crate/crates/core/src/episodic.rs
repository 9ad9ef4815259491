//! Episodic memory over input facts.
//!
//! Each episode scores every fact against the question and the previous
//! memory, normalises the scores into attention gates, walks the facts with
//! an attention-based GRU whose update gate is replaced by the fact's
//! attention gate, and folds the result into a new memory through a ReLU
//! affine layer. Every episode owns its own parameters.

use crate::encoders::{InputFacts, Modality};
use crate::error::{Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::params::ParamId;
use crate::tensor::{Tape, Tensor, Var};

/// Softmax over facts for one episode (1-based `episode`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionGates {
    pub episode: usize,
    pub g: Var,
}

/// Scores `z_i = [f_i ∘ q ; f_i ∘ m]` with a one-hidden-layer tanh network.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub hidden: Linear,
    pub out: Linear,
}

impl GateNetwork {
    pub fn new(b: &mut ParamBuilder<'_>, hidden: usize) -> Result<Self> {
        Ok(GateNetwork {
            hidden: Linear::new(&mut b.sub("hidden"), 2 * hidden, hidden)?,
            out: Linear::new(&mut b.sub("out"), hidden, 1)?,
        })
    }
}

/// GRU with the update gate replaced by an external scalar gate.
#[derive(Clone, Debug)]
pub struct AttentionGru {
    pub reset_input: Linear,
    pub reset_hidden: ParamId,
    pub candidate_input: Linear,
    pub candidate_hidden: ParamId,
    pub hidden: usize,
}

impl AttentionGru {
    pub fn new(b: &mut ParamBuilder<'_>, hidden: usize) -> Result<Self> {
        Ok(AttentionGru {
            reset_input: Linear::new(&mut b.sub("reset_input"), hidden, hidden)?,
            reset_hidden: b.tensor("reset_hidden", &[hidden, hidden])?,
            candidate_input: Linear::new(&mut b.sub("candidate_input"), hidden, hidden)?,
            candidate_hidden: b.tensor("candidate_hidden", &[hidden, hidden])?,
            hidden,
        })
    }

    /// Standard GRU candidate `tanh(W f + U (r ∘ h) + b)` with reset gate `r`.
    pub fn candidate(&self, tape: &mut Tape<'_>, fact: Var, h_prev: Var) -> Result<Var> {
        let ri = self.reset_input.forward(tape, fact)?;
        let u_r = tape.param(self.reset_hidden);
        let rh = tape.matvec(u_r, h_prev)?;
        let r = tape.add(ri, rh)?;
        let r = tape.sigmoid(r)?;
        let gated = tape.mul(r, h_prev)?;
        let ci = self.candidate_input.forward(tape, fact)?;
        let u = tape.param(self.candidate_hidden);
        let ch = tape.matvec(u, gated)?;
        let pre = tape.add(ci, ch)?;
        tape.tanh(pre)
    }

    /// `h = g ∘ h' + (1 − g) ∘ h_prev`; `gate` must be a one-element tensor in `[0, 1]`.
    pub fn step(&self, tape: &mut Tape<'_>, fact: Var, h_prev: Var, gate: Var) -> Result<Var> {
        let g = tape.value(gate);
        if g.numel() != 1 {
            return Err(Error::Dimension(format!(
                "attention gate must be a single value, got shape {:?}",
                g.shape()
            )));
        }
        let gv = g.item();
        if !(0.0..=1.0).contains(&gv) {
            return Err(Error::Contract(format!("attention gate {gv} outside [0, 1]")));
        }
        for v in [fact, h_prev] {
            if tape.shape(v) != [self.hidden] {
                return Err(Error::Dimension(format!(
                    "attention GRU expects [{}], got {:?}",
                    self.hidden,
                    tape.shape(v)
                )));
            }
        }
        let cand = self.candidate(tape, fact, h_prev)?;
        tape.blend(h_prev, cand, gate)
    }
}

/// Free-function form of [`AttentionGru::step`].
pub fn attention_gru_step(
    tape: &mut Tape<'_>,
    fact: Var,
    h_prev: Var,
    gate: Var,
    params: &AttentionGru,
) -> Result<Var> {
    params.step(tape, fact, h_prev, gate)
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub gates: GateNetwork,
    pub gru: AttentionGru,
    pub memory: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeOutput {
    /// `[q ; h ; m_prev]`, `[3·hidden]`.
    pub context: Var,
    pub gates: AttentionGates,
}

impl Episode {
    pub fn new(b: &mut ParamBuilder<'_>, hidden: usize) -> Result<Self> {
        Ok(Episode {
            gates: GateNetwork::new(&mut b.sub("gate"), hidden)?,
            gru: AttentionGru::new(&mut b.sub("gru"), hidden)?,
            memory: Linear::new(&mut b.sub("memory"), 3 * hidden, hidden)?,
        })
    }

    pub fn compute_gates(
        &self,
        tape: &mut Tape<'_>,
        facts: &InputFacts,
        q: Var,
        m_prev: Var,
        episode: usize,
    ) -> Result<AttentionGates> {
        let hidden = self.gru.hidden;
        if tape.shape(q) != [hidden] || tape.shape(m_prev) != [hidden] {
            return Err(Error::Dimension(format!(
                "gate guidance must be [{hidden}], got q {:?} and m {:?}",
                tape.shape(q),
                tape.shape(m_prev)
            )));
        }
        let mut logits = Vec::with_capacity(facts.len());
        for &f in &facts.rows {
            if tape.shape(f) != [hidden] {
                return Err(Error::Dimension(format!(
                    "fact {:?} does not match hidden size {hidden}",
                    tape.shape(f)
                )));
            }
            let fq = tape.mul(f, q)?;
            let fm = tape.mul(f, m_prev)?;
            let z = tape.concat(&[fq, fm], 0)?;
            let a = self.gates.hidden.forward(tape, z)?;
            let a = tape.tanh(a)?;
            logits.push(self.gates.out.forward(tape, a)?);
        }
        let scores = tape.concat(&logits, 0)?;
        let g = tape.softmax(scores, 0)?;
        Ok(AttentionGates { episode, g })
    }

    pub fn run(
        &self,
        tape: &mut Tape<'_>,
        facts: &InputFacts,
        q: Var,
        m_prev: Var,
        episode: usize,
    ) -> Result<EpisodeOutput> {
        let gates = self.compute_gates(tape, facts, q, m_prev, episode)?;
        let mut h = tape.constant(Tensor::zeros(&[self.gru.hidden]));
        for (i, &f) in facts.rows.iter().enumerate() {
            let gi = tape.pick(gates.g, i)?;
            h = self.gru.step(tape, f, h, gi)?;
        }
        let context = tape.concat(&[q, h, m_prev], 0)?;
        Ok(EpisodeOutput { context, gates })
    }

    /// `m_t = relu(W c_t + b)`.
    pub fn update_memory(&self, tape: &mut Tape<'_>, context: Var) -> Result<Var> {
        if tape.shape(context) != [self.memory.input] {
            return Err(Error::Dimension(format!(
                "episode context must be [{}], got {:?}",
                self.memory.input,
                tape.shape(context)
            )));
        }
        let pre = self.memory.forward(tape, context)?;
        tape.relu(pre)
    }
}

#[derive(Clone, Debug)]
pub struct DmnOutput {
    /// Final memory `m_M`.
    pub memory: Var,
    pub gates: Vec<AttentionGates>,
}

/// One modality's episodic memory module with `M = episodes.len()` episodes.
#[derive(Clone, Debug)]
pub struct EpisodicMemory {
    pub modality: Modality,
    pub init: Linear,
    pub episodes: Vec<Episode>,
}

impl EpisodicMemory {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        modality: Modality,
        hidden: usize,
        episodes: usize,
    ) -> Result<Self> {
        if episodes < 1 {
            return Err(Error::Config("episode count must be at least 1".into()));
        }
        Ok(EpisodicMemory {
            modality,
            init: Linear::new(&mut b.sub("init"), hidden, hidden)?,
            episodes: (0..episodes)
                .map(|t| Episode::new(&mut b.sub(&format!("episode{t}")), hidden))
                .collect::<Result<_>>()?,
        })
    }

    pub fn run(&self, tape: &mut Tape<'_>, facts: &InputFacts, q: Var) -> Result<DmnOutput> {
        if facts.is_empty() {
            return Err(Error::Input("episodic memory needs at least one fact".into()));
        }
        let mut m = self.init.forward(tape, q)?;
        let mut gates = Vec::with_capacity(self.episodes.len());
        for (t, ep) in self.episodes.iter().enumerate() {
            let out = ep.run(tape, facts, q, m, t + 1)?;
            m = ep.update_memory(tape, out.context)?;
            gates.push(out.gates);
        }
        Ok(DmnOutput { memory: m, gates })
    }
}

/// Free-function form of [`EpisodicMemory::run`].
pub fn run_dmn(
    tape: &mut Tape<'_>,
    facts: &InputFacts,
    q: Var,
    params: &EpisodicMemory,
) -> Result<DmnOutput> {
    params.run(tape, facts, q)
}

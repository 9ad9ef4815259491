//! Central finite-difference gradient checking.
//!
//! Relative error of an element is `|a - n| / max(|a|, |n|, 1e-3)` where
//! `a` is the tape gradient and `n` the central difference. Elements whose
//! one-sided differences disagree by more than [`KINK_JUMP`] sit on a ReLU
//! boundary; they are reported as flagged rather than counted as failures.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-3;
pub const KINK_JUMP: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Elements sitting on a non-differentiable point (subgradient 0 used).
    pub boundary: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub piece: String,
    pub tolerance: f64,
    pub step: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn boundary_count(&self) -> usize {
        self.blocks.iter().map(|b| b.boundary.len()).sum()
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.blocks.extend(other.blocks);
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check every parameter of `store` against `loss`, a closure that builds a
/// scalar on a fresh tape.
pub fn check_store<F>(store: &mut ParamStore, step: f64, tol: f64, loss: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var> + Sync,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let root = loss(&mut tape)?;
        tape.backward(root)?;
        Gradients::from_tape(store, &tape)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let root = loss(&mut tape)?;
        Ok(tape.value(root).item())
    };
    let base = &*store;
    let blocks = base
        .ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| -> Result<BlockReport> {
            let mut s = base.clone();
            let grad = analytic.block(id);
            let mut report = BlockReport {
                name: base.name(id).to_string(),
                size: grad.len(),
                max_rel_error: 0.0,
                worst_index: 0,
                boundary: Vec::new(),
            };
            for (k, &a) in grad.iter().enumerate() {
                let orig = base.value(id).data()[k];
                s.value_mut(id).data_mut()[k] = orig + step;
                let plus = eval(&s)?;
                s.value_mut(id).data_mut()[k] = orig - step;
                let minus = eval(&s)?;
                s.value_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let err = rel_error(a, numeric);
                if err >= tol {
                    let mid = eval(&s)?;
                    let jump = ((plus - mid) / step - (mid - minus) / step).abs();
                    if jump > KINK_JUMP {
                        report.boundary.push(k);
                        continue;
                    }
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_index = k;
                }
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        piece: String::new(),
        tolerance: tol,
        step,
        blocks,
    })
}


/// Sub-networks the harness can check in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Affine,
    Lstm,
    TextAttention,
    Dmn,
    Fusion,
    Decoder,
    Pipeline,
}

impl Piece {
    pub const ALL: [Piece; 7] = [
        Piece::Affine,
        Piece::Lstm,
        Piece::TextAttention,
        Piece::Dmn,
        Piece::Fusion,
        Piece::Decoder,
        Piece::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Piece::Affine => "affine",
            Piece::Lstm => "lstm",
            Piece::TextAttention => "text-attention",
            Piece::Dmn => "dmn",
            Piece::Fusion => "fusion",
            Piece::Decoder => "decoder",
            Piece::Pipeline => "pipeline",
        }
    }
}

impl std::str::FromStr for Piece {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Piece::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                crate::error::Error::Config(format!(
                    "unknown piece `{s}` (expected one of {})",
                    Piece::ALL.map(Piece::name).join(", ")
                ))
            })
    }
}

/// Sizes of the random instance used for pipeline checks.
pub const PIPE_HIDDEN: usize = 8;
pub const PIPE_SEGMENTS: usize = 4;
pub const PIPE_TEXT_LEN: usize = 3;
pub const PIPE_VOCAB: usize = 12;
pub const PIPE_EPISODES: usize = 2;
pub const PIPE_FEAT: usize = 5;

fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape matches data")
}

fn random_tokens(rng: &mut rand_chacha::ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    use rand::Rng;
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

/// Two-turn dialogue over the pipeline sizes.
pub fn pipeline_instance(seed: u64) -> crate::model::PreparedDialogue {
    use crate::data::vocab::{BOS, EOS};
    use crate::model::{PreparedDialogue, PreparedTurn};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let turn = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut target = vec![BOS];
        target.extend(random_tokens(rng, 2, PIPE_VOCAB));
        target.push(EOS);
        PreparedTurn {
            question: random_tokens(rng, 3, PIPE_VOCAB),
            target,
        }
    };
    let turns = vec![turn(&mut rng), turn(&mut rng)];
    PreparedDialogue {
        id: format!("gradcheck-{seed}"),
        caption: random_tokens(&mut rng, PIPE_TEXT_LEN, PIPE_VOCAB),
        summary: random_tokens(&mut rng, PIPE_TEXT_LEN, PIPE_VOCAB),
        turns,
        visual: random_tensor(&mut rng, &[PIPE_SEGMENTS, PIPE_FEAT], 2.0),
        audio: random_tensor(&mut rng, &[PIPE_SEGMENTS, PIPE_FEAT], 2.0),
    }
}

/// Check one piece on a random instance drawn from `seed`.
pub fn check_piece(piece: Piece, seed: u64, tol: f64) -> Result<GradcheckReport> {
    use crate::attention::{TextAttention, TextSource};
    use crate::decoder::{ChainState, Decoder};
    use crate::encoders::{EmbeddingTable, InputFacts, LstmCell, Modality, TextStates};
    use crate::episodic::EpisodicMemory;
    use crate::fusion::fuse;
    use crate::layers::{Linear, ParamBuilder};
    use crate::model::{Model, ModelConfig};
    use crate::training::{cross_entropy, dialogue_loss};
    use rand::SeedableRng;

    let h = PIPE_HIDDEN;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let step = DEFAULT_STEP;
    let mut report = match piece {
        Piece::Affine => {
            let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng, 1.0), 5, 3)?;
            let x = store.insert("input", random_tensor(&mut rng, &[5], 2.0))?;
            let r = random_tensor(&mut rng, &[3], 2.0);
            check_store(&mut store, step, tol, |t| {
                let xv = t.param(x);
                let y = lin.forward(t, xv)?;
                let rv = t.constant(r.clone());
                let p = t.mul(y, rv)?;
                t.sum(p)
            })?
        }
        Piece::Lstm => {
            let cell = LstmCell::new(&mut ParamBuilder::new(&mut store, &mut rng, 0.5), 4, h)?;
            let xs = store.insert("inputs", random_tensor(&mut rng, &[3, 4], 2.0))?;
            let r = random_tensor(&mut rng, &[h], 2.0);
            check_store(&mut store, step, tol, |t| {
                let x = t.param(xs);
                let (mut hs, mut cs) = cell.zero_state(t);
                for i in 0..3 {
                    let xi = t.row(x, i)?;
                    (hs, cs) = cell.step(t, xi, hs, cs)?;
                }
                let both = t.add(hs, cs)?;
                let rv = t.constant(r.clone());
                let p = t.mul(both, rv)?;
                t.sum(p)
            })?
        }
        Piece::TextAttention => {
            let att = TextAttention::new(
                &mut ParamBuilder::new(&mut store, &mut rng, 0.5),
                TextSource::Caption,
                h,
            )?;
            let states = store.insert("states", random_tensor(&mut rng, &[PIPE_TEXT_LEN, h], 2.0))?;
            let q = store.insert("query", random_tensor(&mut rng, &[h], 2.0))?;
            let r = random_tensor(&mut rng, &[h], 2.0);
            check_store(&mut store, step, tol, |t| {
                let s = t.param(states);
                let rows = (0..PIPE_TEXT_LEN)
                    .map(|i| t.row(s, i))
                    .collect::<Result<Vec<_>>>()?;
                let text = TextStates { states: s, rows };
                let qv = t.param(q);
                let ctx = att.attend(t, &text, qv)?;
                let rv = t.constant(r.clone());
                let p = t.mul(ctx.context, rv)?;
                t.sum(p)
            })?
        }
        Piece::Dmn => {
            let dmn = EpisodicMemory::new(
                &mut ParamBuilder::new(&mut store, &mut rng, 0.5),
                Modality::Visual,
                h,
                PIPE_EPISODES,
            )?;
            let facts = store.insert("facts", random_tensor(&mut rng, &[PIPE_SEGMENTS, h], 1.0))?;
            let q = store.insert("query", random_tensor(&mut rng, &[h], 1.0))?;
            check_store(&mut store, step, tol, |t| {
                let f = t.param(facts);
                let rows = (0..PIPE_SEGMENTS)
                    .map(|i| t.row(f, i))
                    .collect::<Result<Vec<_>>>()?;
                let input = InputFacts {
                    modality: Modality::Visual,
                    facts: f,
                    rows,
                };
                let qv = t.param(q);
                let out = dmn.run(t, &input, qv)?;
                t.sum(out.memory)
            })?
        }
        Piece::Fusion => {
            let ids = (0..4)
                .map(|j| store.insert(format!("context{j}"), random_tensor(&mut rng, &[h], 2.0)))
                .collect::<Result<Vec<_>>>()?;
            let r = random_tensor(&mut rng, &[h], 2.0);
            check_store(&mut store, step, tol, |t| {
                let cs: Vec<_> = ids.iter().map(|&id| t.param(id)).collect();
                let out = fuse(t, &cs)?;
                let rv = t.constant(r.clone());
                let p = t.mul(out.v, rv)?;
                t.sum(p)
            })?
        }
        Piece::Decoder => {
            let mut b = ParamBuilder::new(&mut store, &mut rng, 0.5);
            let embed = EmbeddingTable::new(&mut b.sub("embed"), PIPE_VOCAB, h)?;
            let dec = Decoder::new(&mut b.sub("decoder"), h, h, PIPE_VOCAB)?;
            let v = store.insert("context", random_tensor(&mut rng, &[h], 1.0))?;
            let s_prev = store.insert("previous", random_tensor(&mut rng, &[h], 1.0))?;
            let target = {
                let mut t = vec![crate::data::vocab::BOS];
                t.extend(random_tokens(&mut rng, 3, PIPE_VOCAB));
                t.push(crate::data::vocab::EOS);
                t
            };
            check_store(&mut store, step, tol, |t| {
                let chain = ChainState {
                    s_prev_final: t.param(s_prev),
                    question_index: 2,
                };
                let vv = t.param(v);
                let (logits, _) = dec.decode_teacher_forced(t, &embed, &chain, vv, &target)?;
                cross_entropy(t, &logits, &target)
            })?
        }
        Piece::Pipeline => {
            let cfg = ModelConfig {
                vocab_size: PIPE_VOCAB,
                embed_dim: h,
                hidden: h,
                visual_dim: PIPE_FEAT,
                audio_dim: PIPE_FEAT,
                episodes: PIPE_EPISODES,
                fusion: Default::default(),
            };
            let (model, s) = Model::new(cfg, seed)?;
            store = s;
            let dialogue = pipeline_instance(seed);
            check_store(&mut store, step, tol, |t| {
                Ok(dialogue_loss(&model, t, &dialogue, 0.1, true)?.0)
            })?
        }
    };
    report.piece = piece.name().to_string();
    Ok(report)
}

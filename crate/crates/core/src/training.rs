//! Objective, optimizer and training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::embeddings::{load_embeddings, EmbeddingCoverage};
use crate::data::vocab::{build_vocab, Vocabulary};
use crate::data::Sample;
use crate::episodic::AttentionGates;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{prepare_all, summarize, Model, ModelConfig, PreparedDialogue, TurnOutput};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Tape, Var};

pub const ENTROPY_FLOOR: f64 = 1e-12;
pub const GATE_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Mean negative log-likelihood over target tokens.
    pub ce: f64,
    /// `Σ H(g)` over every gate distribution.
    pub entropy_sum: f64,
    /// `gamma · entropy_sum`.
    pub entropy_penalty: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Token cross-entropy for `target = BOS y_1 … EOS` given one logits row per
/// predicted token.
pub fn cross_entropy(tape: &mut Tape<'_>, step_logits: &[Var], target: &[usize]) -> Result<Var> {
    if step_logits.is_empty() || step_logits.len() + 1 != target.len() {
        return Err(Error::Input(format!(
            "{} logits rows for a target of {} tokens",
            step_logits.len(),
            target.len()
        )));
    }
    let mut terms = Vec::with_capacity(step_logits.len());
    for (&l, &gold) in step_logits.iter().zip(&target[1..]) {
        let lp = tape.log_softmax(l)?;
        terms.push(tape.pick(lp, gold)?);
    }
    let all = tape.concat(&terms, 0)?;
    let s = tape.sum(all)?;
    tape.scale(s, -1.0 / step_logits.len() as f64)
}

/// `H(g) = −Σ g log(g + 1e-12)`; rejects vectors that are not distributions.
pub fn gate_entropy(tape: &mut Tape<'_>, g: Var) -> Result<Var> {
    let values = tape.value(g).data();
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > GATE_SUM_TOL || values.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(format!(
            "gate vector is not a distribution (sum {sum})"
        )));
    }
    let shifted = tape.add_scalar(g, ENTROPY_FLOOR)?;
    let logs = tape.log(shifted)?;
    let prod = tape.mul(g, logs)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0)
}

/// `ce + gamma · Σ_m Σ_r H(g_r)` over the supplied gate distributions.
pub fn loss(
    tape: &mut Tape<'_>,
    step_logits: &[Var],
    target: &[usize],
    gates: &[AttentionGates],
    gamma: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    let ce = cross_entropy(tape, step_logits, target)?;
    let mut total = ce;
    let mut entropy_sum = 0.0;
    let mut terms = Vec::with_capacity(gates.len());
    for g in gates {
        let h = gate_entropy(tape, g.g)?;
        entropy_sum += tape.value(h).item();
        terms.push(h);
    }
    if gamma > 0.0 && !terms.is_empty() {
        let hs = tape.concat(&terms, 0)?;
        let hsum = tape.sum(hs)?;
        let pen = tape.scale(hsum, gamma)?;
        total = tape.add(ce, pen)?;
    }
    let ce_v = tape.value(ce).item();
    Ok((
        total,
        LossBreakdown {
            ce: ce_v,
            entropy_sum,
            entropy_penalty: gamma * entropy_sum,
            gamma,
            total: tape.value(total).item(),
        },
    ))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub episodes: usize,
    pub gamma: f64,
    pub lr: f64,
    /// QA targets per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub fusion: FusionMode,
    #[serde(default = "default_true")]
    pub chain: bool,
    pub clip_norm: f64,
    pub min_count: usize,
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 128,
            embed_dim: 128,
            episodes: 2,
            gamma: 0.1,
            lr: 1e-3,
            batch_size: 1,
            epochs: 30,
            beam_width: 5,
            max_len: 30,
            seed: 0,
            val_fraction: 0.2,
            fusion: FusionMode::Literal,
            chain: true,
            clip_norm: 5.0,
            min_count: 1,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("episodes", self.episodes),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("beam_width", self.beam_width),
            ("max_len", self.max_len),
            ("min_count", self.min_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be a non-negative number".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub settings: AdamSettings,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            store
                .ids()
                .map(|id| vec![0.0; store.value(id).numel()])
                .collect()
        };
        Adam {
            settings: AdamSettings {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. A zero learning rate leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamSettings {
            lr,
            beta1,
            beta2,
            eps,
        } = self.settings;
        if lr == 0.0 {
            return;
        }
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.block(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let w = store.value_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub entropy: f64,
    pub total: f64,
    pub val_token_acc: Option<f64>,
    pub val_gate_entropy: Option<f64>,
    pub optimizer: AdamSettings,
    pub wall_ms: u64,
}

/// Gradient and loss totals for one dialogue or one target.
pub struct DialogueStep {
    pub grads: Gradients,
    pub ce: f64,
    pub entropy: f64,
    pub targets: usize,
}

fn turn_gates(o: &TurnOutput) -> Vec<AttentionGates> {
    o.context
        .visual
        .gates
        .iter()
        .chain(&o.context.audio.gates)
        .copied()
        .collect()
}

/// Summed loss over every QA turn of `dialogue`; each turn is one target.
pub fn dialogue_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    dialogue: &PreparedDialogue,
    gamma: f64,
    chain: bool,
) -> Result<(Var, Vec<LossBreakdown>)> {
    let outputs = model.forward_dialogue(tape, dialogue, chain)?;
    let mut roots = Vec::with_capacity(outputs.len());
    let mut parts = Vec::with_capacity(outputs.len());
    for (o, turn) in outputs.iter().zip(&dialogue.turns) {
        let (root, lb) = loss(tape, &o.logits, &turn.target, &turn_gates(o), gamma)?;
        roots.push(root);
        parts.push(lb);
    }
    let all = tape.concat(&roots, 0)?;
    Ok((tape.sum(all)?, parts))
}

/// Loss of turn `turn` alone, with the earlier turns replayed as
/// teacher-forced history.
pub fn target_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    dialogue: &PreparedDialogue,
    turn: usize,
    gamma: f64,
    chain: bool,
) -> Result<(Var, LossBreakdown)> {
    let outputs = model.forward_turns(tape, dialogue, turn + 1, chain)?;
    let o = &outputs[turn];
    loss(tape, &o.logits, &dialogue.turns[turn].target, &turn_gates(o), gamma)
}

fn finish_step(
    store: &ParamStore,
    mut tape: Tape<'_>,
    root: Var,
    example: String,
    parts: &[LossBreakdown],
) -> Result<DialogueStep> {
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            example,
            detail: format!("loss evaluated to {value}"),
        });
    }
    tape.backward(root)?;
    let grads = Gradients::from_tape(store, &tape);
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            example,
            detail: "gradient contains non-finite entries".into(),
        });
    }
    Ok(DialogueStep {
        grads,
        ce: parts.iter().map(|p| p.ce).sum(),
        entropy: parts.iter().map(|p| p.entropy_sum).sum(),
        targets: parts.len(),
    })
}

pub fn dialogue_step(
    model: &Model,
    store: &ParamStore,
    dialogue: &PreparedDialogue,
    gamma: f64,
    chain: bool,
) -> Result<DialogueStep> {
    let mut tape = Tape::with_params(store);
    let (root, parts) = dialogue_loss(model, &mut tape, dialogue, gamma, chain)?;
    finish_step(store, tape, root, dialogue.id.clone(), &parts)
}

pub fn target_step(
    model: &Model,
    store: &ParamStore,
    dialogue: &PreparedDialogue,
    turn: usize,
    gamma: f64,
    chain: bool,
) -> Result<DialogueStep> {
    let mut tape = Tape::with_params(store);
    let (root, part) = target_loss(model, &mut tape, dialogue, turn, gamma, chain)?;
    finish_step(store, tape, root, format!("{} turn {}", dialogue.id, turn + 1), &[part])
}

/// Contiguous split: the last `ceil(n · val_fraction)` samples are held out.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let val = ((n as f64) * val_fraction).ceil() as usize;
    let val = val.min(n.saturating_sub(1));
    ((0..n - val).collect(), (n - val..n).collect())
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub metrics: Vec<EpochMetrics>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub coverage: Option<EmbeddingCoverage>,
}

pub fn model_config_for(cfg: &TrainConfig, vocab: &Vocabulary, sample: &Sample) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        visual_dim: sample.visual.cols(),
        audio_dim: sample.audio.cols(),
        episodes: cfg.episodes,
        fusion: cfg.fusion,
    }
}

/// Train on `samples`, calling `on_epoch` after every epoch.
pub fn train(
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction);
    let train_samples: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_samples: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let examples: Vec<_> = train_samples.iter().map(|s| s.example.clone()).collect();
    let vocab = build_vocab(&examples, cfg.min_count)?;
    let (model, mut store) = Model::new(model_config_for(cfg, &vocab, &samples[0]), cfg.seed)?;
    let coverage = match &cfg.embeddings {
        Some(path) => Some(load_embeddings(path, &vocab, &model.embed, &mut store)?),
        None => None,
    };
    let train_set = prepare_all(&train_samples, &vocab);
    let val_set = prepare_all(&val_samples, &vocab);

    let mut adam = Adam::new(&store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    // Every QA pair is a training target; earlier pairs are its history.
    let mut order: Vec<(usize, usize)> = train_set
        .iter()
        .enumerate()
        .flat_map(|(d, dl)| (0..dl.turns.len()).map(move |t| (d, t)))
        .collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut ce, mut ent, mut targets) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let steps: Vec<DialogueStep> = batch
                .par_iter()
                .map(|&(d, t)| target_step(&model, &store, &train_set[d], t, cfg.gamma, cfg.chain))
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros(&store);
            let mut n = 0;
            for s in &steps {
                grads.add(&s.grads);
                ce += s.ce;
                ent += s.entropy;
                n += s.targets;
            }
            targets += n;
            grads.scale(1.0 / n as f64);
            grads.clip_global_norm(cfg.clip_norm);
            adam.step(&mut store, &grads);
        }
        let (val_token_acc, val_gate_entropy) = if val_set.is_empty() {
            (None, None)
        } else {
            let s = summarize(&model.evaluate(&store, &val_set, cfg.chain)?);
            (Some(s.token_accuracy), Some(s.mean_gate_entropy))
        };
        let ce = ce / targets as f64;
        let entropy = ent / targets as f64;
        let m = EpochMetrics {
            epoch,
            ce,
            entropy,
            total: ce + cfg.gamma * entropy,
            val_token_acc,
            val_gate_entropy,
            optimizer: adam.settings.clone(),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&m)?;
        metrics.push(m);
    }

    Ok(TrainOutcome {
        model,
        store,
        vocab,
        metrics,
        train_indices: train_idx,
        val_indices: val_idx,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn gates(t: &mut Tape<'_>, g: &[f64]) -> AttentionGates {
        AttentionGates {
            episode: 1,
            g: t.constant(Tensor::vector(g.to_vec()).unwrap()),
        }
    }

    fn logits(t: &mut Tape<'_>) -> Vec<Var> {
        vec![
            t.constant(Tensor::vector(vec![0.2, -1.0, 0.5, 0.1]).unwrap()),
            t.constant(Tensor::vector(vec![1.5, 0.0, -0.3, 0.7]).unwrap()),
        ]
    }

    #[test]
    fn one_hot_gates_contribute_nothing() {
        let mut t = Tape::new();
        let g = gates(&mut t, &[0.0, 1.0, 0.0]);
        let h = gate_entropy(&mut t, g.g).unwrap();
        assert!(t.value(h).item().abs() <= 3.0 * 1e-12 * 1e-12f64.ln().abs());
    }

    #[test]
    fn uniform_gates_give_ln_n() {
        let mut t = Tape::new();
        let g = gates(&mut t, &[0.25; 4]);
        let h = gate_entropy(&mut t, g.g).unwrap();
        assert!((t.value(h).item() - 4f64.ln()).abs() < 1e-9);
        assert!((4f64.ln() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn zero_gamma_total_is_ce() {
        let mut t = Tape::new();
        let l = logits(&mut t);
        let g = gates(&mut t, &[0.5, 0.5]);
        let (root, lb) = loss(&mut t, &l, &[1, 2, 0], &[g], 0.0).unwrap();
        assert_eq!(lb.total, lb.ce);
        assert_eq!(t.value(root).item(), lb.ce);
        let expected = -(crate::tensor::log_softmax_slice(&[0.2, -1.0, 0.5, 0.1])[2]
            + crate::tensor::log_softmax_slice(&[1.5, 0.0, -0.3, 0.7])[0])
            / 2.0;
        assert!((lb.ce - expected).abs() < 1e-12);
    }

    #[test]
    fn total_adds_weighted_entropy() {
        let mut t = Tape::new();
        let l = logits(&mut t);
        let g1 = gates(&mut t, &[0.5, 0.5]);
        let g2 = gates(&mut t, &[0.25; 4]);
        let (_, lb) = loss(&mut t, &l, &[1, 2, 0], &[g1, g2], 0.1).unwrap();
        let h = 2f64.ln() + 4f64.ln();
        assert!((lb.entropy_sum - h).abs() < 1e-9);
        assert!((lb.total - (lb.ce + 0.1 * lb.entropy_sum)).abs() < 1e-12);
    }

    #[test]
    fn non_distribution_gate_is_contract_error() {
        let mut t = Tape::new();
        let l = logits(&mut t);
        let g = gates(&mut t, &[0.5, 0.6]);
        assert!(matches!(
            loss(&mut t, &l, &[1, 2, 0], &[g], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![0.1, -0.7, 3.0]).unwrap()).unwrap();
        let before = store.clone();
        let mut grads = Gradients::zeros(&store);
        {
            let mut t = Tape::with_params(&store);
            let w = t.param(id);
            let s = t.mul(w, w).unwrap();
            let s = t.sum(s).unwrap();
            t.backward(s).unwrap();
            grads.add_tape(&t);
        }
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, &grads);
        for (a, b) in store.value(id).data().iter().zip(before.value(id).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"hidden": 32}"#).unwrap();
        assert_eq!(partial.hidden, 32);
        assert_eq!(partial.gamma, 0.1);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"hiden": 32}"#).is_err());
        let bad = TrainConfig {
            episodes: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_keeps_training_nonempty() {
        assert_eq!(split_indices(10, 0.2), ((0..8).collect(), vec![8, 9]));
        assert_eq!(split_indices(1, 0.5).0, vec![0]);
        assert!(split_indices(5, 0.0).1.is_empty());
    }
}

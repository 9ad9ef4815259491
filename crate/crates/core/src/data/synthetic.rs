//! Synthetic scene dialogues.
//!
//! Every dialogue describes a clip of `N` segments. Each segment carries one
//! visual event and one independently drawn audio event. A segment's feature
//! row is the event prototype plus a position prototype plus Gaussian noise,
//! so an attention module that matches the queried position can read the
//! planted event. Questions ask for the event of one segment; a single
//! follow-up ("does it happen again ?") after a visual question is answered
//! by whether that event occurs in another segment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::dialogue::{serialize_dialogues, DialogueExample, QaPair};
use crate::data::features::save_features;
use crate::data::Sample;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VISUAL_EVENTS: [&str; 8] = [
    "walking", "running", "jumping", "sitting", "eating", "drinking", "reading", "waving",
];
pub const AUDIO_EVENTS: [&str; 8] = [
    "barking", "ringing", "knocking", "music", "talking", "clapping", "whistling", "humming",
];
/// Largest segment count the position prototypes cover.
pub const POSITION_CAPACITY: usize = 50;
pub const NOISE_STD: f64 = 0.05;
pub const FOLLOW_UP: &str = "does it happen again ?";

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_dialogues: usize,
    pub segments: usize,
    pub feat_dim: usize,
    pub seed: u64,
    /// Segment questions per dialogue; one follow-up is added on top.
    pub segment_questions: usize,
}

impl SyntheticConfig {
    pub fn new(num_dialogues: usize, segments: usize, feat_dim: usize, seed: u64) -> Self {
        SyntheticConfig {
            num_dialogues,
            segments,
            feat_dim,
            seed,
            segment_questions: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionKind {
    /// 0-based segment index.
    Segment { modality: Modality, segment: usize },
    /// Refers to the visual segment asked about in the previous turn.
    FollowUp { segment: usize },
}

#[derive(Clone, Debug)]
pub struct SyntheticDialogue {
    pub sample: Sample,
    pub visual_events: Vec<usize>,
    pub audio_events: Vec<usize>,
    pub questions: Vec<QuestionKind>,
}

impl SyntheticDialogue {
    /// Answer read directly from the planted events.
    pub fn oracle_answer(&self, turn: usize) -> &'static str {
        match self.questions[turn] {
            QuestionKind::Segment {
                modality: Modality::Visual,
                segment,
            } => VISUAL_EVENTS[self.visual_events[segment]],
            QuestionKind::Segment {
                modality: Modality::Audio,
                segment,
            } => AUDIO_EVENTS[self.audio_events[segment]],
            QuestionKind::FollowUp { segment } => {
                let e = self.visual_events[segment];
                let repeats = self
                    .visual_events
                    .iter()
                    .enumerate()
                    .any(|(i, &x)| i != segment && x == e);
                if repeats {
                    "yes"
                } else {
                    "no"
                }
            }
        }
    }
}

/// Accuracy of always answering the single most likely event. Events are
/// drawn uniformly, so every event is equally likely.
pub fn majority_baseline_accuracy(num_events: usize) -> f64 {
    1.0 / num_events as f64
}

/// Probability that a follow-up is answered "yes" for `segments` segments.
pub fn follow_up_yes_probability(num_events: usize, segments: usize) -> f64 {
    1.0 - (1.0 - 1.0 / num_events as f64).powi(segments as i32 - 1)
}

fn prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn stream(
    rng: &mut ChaCha8Rng,
    events: &[usize],
    event_protos: &[Vec<f64>],
    position_protos: &[Vec<f64>],
) -> Result<Tensor> {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise scale");
    let rows: Vec<Vec<f64>> = events
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            event_protos[e]
                .iter()
                .zip(&position_protos[i])
                .map(|(a, b)| (a + b + noise.sample(rng)) as f32 as f64)
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticDialogue>> {
    if cfg.num_dialogues == 0 || cfg.segments == 0 || cfg.feat_dim == 0 {
        return Err(Error::Config(
            "dialogue count, segment count and feature size must be positive".into(),
        ));
    }
    if cfg.segments > POSITION_CAPACITY {
        return Err(Error::Config(format!(
            "{} segments exceed the position capacity of {POSITION_CAPACITY}",
            cfg.segments
        )));
    }
    if cfg.segment_questions == 0 {
        return Err(Error::Config("need at least one segment question".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let visual_protos = prototypes(&mut rng, VISUAL_EVENTS.len(), cfg.feat_dim);
    let audio_protos = prototypes(&mut rng, AUDIO_EVENTS.len(), cfg.feat_dim);
    let visual_pos = prototypes(&mut rng, POSITION_CAPACITY, cfg.feat_dim);
    let audio_pos = prototypes(&mut rng, POSITION_CAPACITY, cfg.feat_dim);

    let mut out = Vec::with_capacity(cfg.num_dialogues);
    for d in 0..cfg.num_dialogues {
        let n = cfg.segments;
        let visual_events: Vec<usize> =
            (0..n).map(|_| rng.random_range(0..VISUAL_EVENTS.len())).collect();
        let audio_events: Vec<usize> =
            (0..n).map(|_| rng.random_range(0..AUDIO_EVENTS.len())).collect();
        let visual = stream(&mut rng, &visual_events, &visual_protos, &visual_pos)?;
        let audio = stream(&mut rng, &audio_events, &audio_protos, &audio_pos)?;

        let mut asked: Vec<(Modality, usize)> = (0..cfg.segment_questions)
            .map(|_| {
                let m = if rng.random_bool(0.5) {
                    Modality::Visual
                } else {
                    Modality::Audio
                };
                (m, rng.random_range(0..n))
            })
            .collect();
        if !asked.iter().any(|(m, _)| *m == Modality::Visual) {
            asked[0].0 = Modality::Visual;
        }
        let visual_turns: Vec<usize> = asked
            .iter()
            .enumerate()
            .filter(|(_, (m, _))| *m == Modality::Visual)
            .map(|(i, _)| i)
            .collect();
        let anchor = *visual_turns.choose(&mut rng).expect("one visual question");
        let mut questions = Vec::with_capacity(asked.len() + 1);
        for (i, &(modality, segment)) in asked.iter().enumerate() {
            questions.push(QuestionKind::Segment { modality, segment });
            if i == anchor {
                questions.push(QuestionKind::FollowUp { segment });
            }
        }

        let id = format!("synth_{d:05}");
        let mut dialogue = SyntheticDialogue {
            sample: Sample {
                example: DialogueExample {
                    caption: words(&format!(
                        "the video starts with {} .",
                        VISUAL_EVENTS[visual_events[0]]
                    )),
                    summary: words(&format!(
                        "the video ends with {} .",
                        VISUAL_EVENTS[visual_events[n - 1]]
                    )),
                    qa_pairs: Vec::new(),
                    visual_features_ref: PathBuf::from(format!("features/{id}_visual.dmnf")),
                    audio_features_ref: PathBuf::from(format!("features/{id}_audio.dmnf")),
                    id,
                },
                visual,
                audio,
            },
            visual_events,
            audio_events,
            questions,
        };
        dialogue.sample.example.qa_pairs = (0..dialogue.questions.len())
            .map(|turn| {
                let question = match dialogue.questions[turn] {
                    QuestionKind::Segment {
                        modality: Modality::Visual,
                        segment,
                    } => format!("what happens in segment {} ?", segment + 1),
                    QuestionKind::Segment {
                        modality: Modality::Audio,
                        segment,
                    } => format!("what sound is in segment {} ?", segment + 1),
                    QuestionKind::FollowUp { .. } => FOLLOW_UP.to_string(),
                };
                QaPair {
                    question: words(&question),
                    answer: vec![dialogue.oracle_answer(turn).to_string()],
                }
            })
            .collect();
        out.push(dialogue);
    }
    Ok(out)
}

/// Write `dialogues.json` and `features/*.dmnf` under `dir`; returns the JSON path.
pub fn write_corpus(dir: &Path, dialogues: &[SyntheticDialogue]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    for d in dialogues {
        let ex = &d.sample.example;
        save_features(&d.sample.visual, &dir.join(&ex.visual_features_ref))?;
        save_features(&d.sample.audio, &dir.join(&ex.audio_features_ref))?;
    }
    let examples: Vec<DialogueExample> =
        dialogues.iter().map(|d| d.sample.example.clone()).collect();
    let path = dir.join("dialogues.json");
    fs::write(&path, serialize_dialogues(&examples)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_corpus;

    fn small() -> Vec<SyntheticDialogue> {
        generate_synthetic(&SyntheticConfig::new(20, 6, 8, 11)).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let a = small();
        let b = small();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample, y.sample);
            assert_eq!(x.questions, y.questions);
        }
    }

    #[test]
    fn answers_come_from_event_vocabulary() {
        for d in small() {
            for (turn, qa) in d.sample.example.qa_pairs.iter().enumerate() {
                assert_eq!(qa.answer.len(), 1);
                let a = qa.answer[0].as_str();
                match d.questions[turn] {
                    QuestionKind::Segment { .. } => {
                        assert!(VISUAL_EVENTS.contains(&a) || AUDIO_EVENTS.contains(&a))
                    }
                    QuestionKind::FollowUp { .. } => assert!(a == "yes" || a == "no"),
                }
            }
        }
    }

    #[test]
    fn follow_up_follows_a_visual_question() {
        for d in small() {
            let turns: Vec<_> = d
                .questions
                .iter()
                .enumerate()
                .filter(|(_, q)| matches!(q, QuestionKind::FollowUp { .. }))
                .collect();
            assert_eq!(turns.len(), 1);
            let (t, QuestionKind::FollowUp { segment }) = turns[0] else {
                unreachable!()
            };
            assert_eq!(
                d.questions[t - 1],
                QuestionKind::Segment {
                    modality: Modality::Visual,
                    segment: *segment
                }
            );
        }
    }

    #[test]
    fn oracle_is_perfect() {
        let data = small();
        let mut total = 0;
        let mut correct = 0;
        for d in &data {
            for (turn, qa) in d.sample.example.qa_pairs.iter().enumerate() {
                total += 1;
                correct += usize::from(d.oracle_answer(turn) == qa.answer[0]);
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn majority_baseline_matches_empirical_frequency() {
        let analytic = majority_baseline_accuracy(VISUAL_EVENTS.len());
        assert!(analytic <= 1.0 / 8.0 + 0.1);
        let data = generate_synthetic(&SyntheticConfig::new(2000, 6, 4, 3)).unwrap();
        let mut counts = [0usize; 8];
        let mut n = 0;
        for d in &data {
            for &e in &d.visual_events {
                counts[e] += 1;
                n += 1;
            }
        }
        let best = *counts.iter().max().unwrap() as f64 / n as f64;
        assert!((best - analytic).abs() < 0.01, "{best} vs {analytic}");
    }

    #[test]
    fn capacity_is_enforced() {
        assert!(matches!(
            generate_synthetic(&SyntheticConfig::new(1, 51, 4, 0)),
            Err(Error::Config(_))
        ));
        assert!(generate_synthetic(&SyntheticConfig::new(1, 50, 4, 0)).is_ok());
    }

    #[test]
    fn written_corpus_loads_back() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &data).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (l, d) in loaded.iter().zip(&data) {
            assert_eq!(l.example.qa_pairs, d.sample.example.qa_pairs);
            assert_eq!(l.visual, d.sample.visual);
            assert_eq!(l.audio, d.sample.audio);
        }
    }
}

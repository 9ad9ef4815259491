//! Entropy-enhanced dynamic memory network for scene-aware dialogue.

pub mod attention;
pub mod bleu;
pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod dump;
pub mod encoders;
pub mod episodic;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

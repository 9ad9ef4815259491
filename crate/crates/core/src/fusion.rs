//! Fusion of the per-modality context vectors into a single vector `v`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Per-dimension softmax across modalities of the context values themselves.
    #[default]
    Literal,
    /// One question-conditioned score per modality.
    QuestionGated,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(FusionMode::Literal),
            "question-gated" => Ok(FusionMode::QuestionGated),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected literal or question-gated)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Literal => "literal",
            FusionMode::QuestionGated => "question-gated",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionResult {
    /// `[modalities × hidden]` for literal fusion, `[modalities]` when question-gated.
    pub beta: Var,
    pub v: Var,
}

fn check_contexts(tape: &Tape<'_>, contexts: &[Var]) -> Result<usize> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::Input("fusion needs at least one context".into()))?;
    let shape = tape.shape(*first).to_vec();
    if shape.len() != 1 {
        return Err(Error::Dimension(format!("contexts must be vectors, got {shape:?}")));
    }
    for &c in contexts {
        if tape.shape(c) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "context shapes {shape:?} and {:?} differ",
                tape.shape(c)
            )));
        }
    }
    Ok(shape[0])
}

/// `β[j,k] = softmax_j(C_j[k])`, `v[k] = Σ_j β[j,k] C_j[k]`.
pub fn fuse(tape: &mut Tape<'_>, contexts: &[Var]) -> Result<FusionResult> {
    check_contexts(tape, contexts)?;
    let stacked = tape.stack_rows(contexts)?;
    let beta = tape.softmax(stacked, 0)?;
    let weighted = tape.mul(beta, stacked)?;
    let v = tape.sum_axis(weighted, 0)?;
    Ok(FusionResult { beta, v })
}

/// `score_j = w · tanh(W [C_j ; q] + b)`, `β = softmax(score)`, `v = Σ_j β_j C_j`.
#[derive(Clone, Debug)]
pub struct QuestionGatedFusion {
    pub proj: Linear,
    pub score: Linear,
}

impl QuestionGatedFusion {
    pub fn new(b: &mut ParamBuilder<'_>, hidden: usize) -> Result<Self> {
        Ok(QuestionGatedFusion {
            proj: Linear::new(&mut b.sub("proj"), 2 * hidden, hidden)?,
            score: Linear::new(&mut b.sub("score"), hidden, 1)?,
        })
    }

    pub fn fuse(&self, tape: &mut Tape<'_>, contexts: &[Var], q: Var) -> Result<FusionResult> {
        let hidden = check_contexts(tape, contexts)?;
        if tape.shape(q) != [hidden] {
            return Err(Error::Dimension(format!(
                "fusion query must be [{hidden}], got {:?}",
                tape.shape(q)
            )));
        }
        let scores = contexts
            .iter()
            .map(|&c| {
                let z = tape.concat(&[c, q], 0)?;
                let a = self.proj.forward(tape, z)?;
                let a = tape.tanh(a)?;
                self.score.forward(tape, a)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.concat(&scores, 0)?;
        let beta = tape.softmax(scores, 0)?;
        let stacked = tape.stack_rows(contexts)?;
        let row = tape.reshape(beta, &[1, contexts.len()])?;
        let v = tape.matmul(row, stacked)?;
        let v = tape.reshape(v, &[hidden])?;
        Ok(FusionResult { beta, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_store;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecc(t: &mut Tape<'_>, v: &[f64]) -> Var {
        t.constant(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn single_modality_passes_through() {
        let mut t = Tape::new();
        let c = vecc(&mut t, &[0.3, -1.0, 2.0]);
        let r = fuse(&mut t, &[c]).unwrap();
        assert!(t.value(r.beta).data().iter().all(|&b| b == 1.0));
        assert_eq!(t.value(r.v), t.value(c));
    }

    #[test]
    fn identical_contexts_split_evenly() {
        let mut t = Tape::new();
        let a = vecc(&mut t, &[0.3, -1.0, 2.0]);
        let b = vecc(&mut t, &[0.3, -1.0, 2.0]);
        let r = fuse(&mut t, &[a, b]).unwrap();
        assert!(t.value(r.beta).data().iter().all(|&b| b == 0.5));
        assert_eq!(t.value(r.v), t.value(a));
    }

    #[test]
    fn hand_expanded_three_way() {
        let mut t = Tape::new();
        let z1 = vecc(&mut t, &[0.0]);
        let z2 = vecc(&mut t, &[0.0]);
        let x = vecc(&mut t, &[2f64.ln()]);
        let r = fuse(&mut t, &[z1, z2, x]).unwrap();
        let beta = t.value(r.beta).data();
        assert!((beta[0] - 0.25).abs() < 1e-15);
        assert!((beta[1] - 0.25).abs() < 1e-15);
        assert!((beta[2] - 0.5).abs() < 1e-15);
        assert!((t.value(r.v).data()[0] - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        assert!(matches!(fuse(&mut t, &[]), Err(Error::Input(_))));
        let a = vecc(&mut t, &[1.0, 2.0]);
        let b = vecc(&mut t, &[1.0]);
        assert!(matches!(fuse(&mut t, &[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("literal".parse::<FusionMode>().unwrap(), FusionMode::Literal);
        assert_eq!(
            "question-gated".parse::<FusionMode>().unwrap(),
            FusionMode::QuestionGated
        );
        assert!("bilinear".parse::<FusionMode>().is_err());
    }

    #[test]
    fn literal_gradients() {
        let mut store = ParamStore::new();
        let ids: Vec<_> = (0..4)
            .map(|j| {
                let v = (0..3).map(|k| ((j * 3 + k) as f64 * 0.7).sin() * 1.5).collect();
                store.insert(format!("c{j}"), Tensor::vector(v).unwrap()).unwrap()
            })
            .collect();
        let report = check_store(&mut store, 1e-6, 1e-5, |t| {
            let cs: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let r = fuse(t, &cs)?;
            let sq = t.mul(r.v, r.v)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gated_fusion_is_convex_and_differentiable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gate =
            QuestionGatedFusion::new(&mut ParamBuilder::new(&mut store, &mut rng, 0.7), 3).unwrap();
        let ids: Vec<_> = (0..4)
            .map(|j| {
                let v = (0..3).map(|k| ((j * 5 + k) as f64).cos()).collect();
                store.insert(format!("c{j}"), Tensor::vector(v).unwrap()).unwrap()
            })
            .collect();
        let qid = store.insert("q", Tensor::vector(vec![0.2, -0.9, 0.4]).unwrap()).unwrap();
        {
            let mut t = Tape::with_params(&store);
            let cs: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let q = t.param(qid);
            let r = gate.fuse(&mut t, &cs, q).unwrap();
            let beta = t.value(r.beta).data();
            assert_eq!(beta.len(), 4);
            assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let report = check_store(&mut store, 1e-6, 1e-5, |t| {
            let cs: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let q = t.param(qid);
            let r = gate.fuse(t, &cs, q)?;
            t.sum(r.v)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn beta_columns_normalised_and_v_in_hull(
            ctx in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6),
            shift in 0usize..6,
        ) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ctx.iter().map(|c| vecc(&mut t, c)).collect();
            let r = fuse(&mut t, &vars).unwrap();
            let beta = t.value(r.beta).clone();
            let v = t.value(r.v).clone();
            for k in 0..4 {
                let s: f64 = (0..ctx.len()).map(|j| beta.get(j, k)).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                let lo = ctx.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
                let hi = ctx.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v.data()[k] >= lo - 1e-12 && v.data()[k] <= hi + 1e-12);
            }
            let mut rotated = vars.clone();
            rotated.rotate_left(shift % vars.len());
            let r2 = fuse(&mut t, &rotated).unwrap();
            for (a, b) in t.value(r2.v).data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let beta2 = t.value(r2.beta);
            let s = shift % vars.len();
            for j in 0..vars.len() {
                let src = (j + s) % vars.len();
                for k in 0..4 {
                    prop_assert!((beta2.get(j, k) - beta.get(src, k)).abs() < 1e-12);
                }
            }
        }
    }
}

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Registers parameters under a dotted name prefix with uniform
/// `[-bound, bound]` initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    bound: f64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, bound: f64) -> Self {
        ParamBuilder {
            store,
            rng,
            bound,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            bound: self.bound,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let path = self.path(name);
        self.store.uniform(path, shape, self.bound, self.rng)
    }
}

/// Affine map `W x + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: b.tensor("weight", &[output, input])?,
            bias: b.tensor("bias", &[output])?,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let wx = tape.matvec(w, x)?;
        tape.add(wx, b)
    }
}

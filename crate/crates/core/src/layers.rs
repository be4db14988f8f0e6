//! Parameterized building blocks shared by the fusion, attention and model
//! modules. Each holds [`ParamId`]s into a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` on row vectors: `x` is `[T × in]`, `W` is `[in × out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), init_uniform([d_in, d_out], d_in, rng))?;
        let b = store.insert(format!("{name}.b"), init_uniform([d_out], d_in, rng))?;
        Ok(Linear { w, b })
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.get(self.b).numel()
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let b = tape.reshape(b, [1, self.d_out(store)])?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Same-length 1-D convolution over `[C_in × T]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel;
        let w = store.insert(format!("{name}.w"), init_uniform([c_out, c_in, kernel], fan_in, rng))?;
        let b = store.insert(format!("{name}.b"), init_uniform([c_out], fan_in, rng))?;
        Ok(Conv1d { w, b, dilation: 1 })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, Some(b), self.dilation)
    }

    /// Zero weights and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.w, self.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Affine layer norm over the last axis; gamma = 1, beta = 0 at init.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full([c], 1.0)?)?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros([c])?)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

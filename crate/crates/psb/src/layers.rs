//! Small parameterized layers shared by the encoders and decoders.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{uniform_fan_in, BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// LayerNorm with learned gain and bias over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    bias: String,
}

impl LayerNorm {
    pub fn init<R: Real>(store: &mut ParamStore<R>, prefix: &str, dim: usize) -> Self {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        store.insert(&gain, Tensor::full(&[dim], R::ONE));
        store.insert(&bias, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(&self.gain), p.var(&self.bias))
    }
}

/// Affine map `x W + b`; `zero_init` starts the weight (and bias) at zero.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
}

impl Linear {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = format!("{prefix}.w");
        let value = if zero_init {
            Tensor::zeros(&[d_in, d_out])
        } else {
            uniform_fan_in(&[d_in, d_out], d_in, rng)
        };
        store.insert(&weight, value);
        let bias = with_bias.then(|| {
            let name = format!("{prefix}.b");
            store.insert(&name, Tensor::zeros(&[d_out]));
            name
        });
        Self { weight, bias }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(&self.weight))?;
        match &self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two-layer GELU MLP. The second layer is zero-initialized when the MLP
/// feeds a residual connection, so the block starts as the identity.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::init(store, &format!("{prefix}.fc1"), d_in, hidden, true, false, rng);
        let fc2 = Linear::init(store, &format!("{prefix}.fc2"), hidden, d_out, true, zero_last, rng);
        Self { fc1, fc2 }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

//! Parameterised building blocks shared by the heads.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::kernel::init::{kaiming_uniform, xavier_uniform};
use crate::kernel::{Mode, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Layer feeds a ReLU.
    Kaiming,
    Xavier,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::without_bias(store, name, fan_in, fan_out, init, rng);
        layer.bias = Some(store.add(format!("{}.bias", name), Tensor::zeros(&[fan_out])));
        layer
    }

    pub fn without_bias<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Kaiming => kaiming_uniform(fan_in, fan_out, rng),
            Init::Xavier => xavier_uniform(fan_in, fan_out, rng),
        };
        let weight = store.add(format!("{}.weight", name), w);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        match self.bias {
            Some(b) => tape.linear(x, p[self.weight.0], p[b.0]),
            None => tape.matmul(x, p[self.weight.0]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{}.gamma", name), Tensor::full(&[width], T::one()));
        let beta = store.add(format!("{}.beta", name), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma.0], p[self.beta.0], T::lit(LN_EPS))
    }
}

/// Linear -> Dropout -> ReLU -> LayerNorm.
#[derive(Debug, Clone, Copy)]
pub struct MlpBlock {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl MlpBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        width: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(store, &format!("{}.linear", name), fan_in, width, Init::Kaiming, rng);
        let norm = LayerNorm::new(store, &format!("{}.norm", name), width);
        Self {
            linear,
            norm,
            dropout,
        }
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.linear.forward(tape, p, x)?;
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        let h = tape.relu(h);
        self.norm.forward(tape, p, h)
    }
}

/// Two-layer ReLU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{}.up", name), width, hidden, Init::Kaiming, rng),
            down: Linear::new(store, &format!("{}.down", name), hidden, width, Init::Xavier, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Dropout followed by a linear map to class scores.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub linear: Linear,
    pub dropout: f64,
}

impl Classifier {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, width, classes, Init::Xavier, rng),
            dropout,
        }
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = tape.dropout(x, self.dropout, mode, rng)?;
        self.linear.forward(tape, p, h)
    }
}

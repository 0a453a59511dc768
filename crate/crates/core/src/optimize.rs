//! Mini-batch gradient descent: plain, momentum and Nesterov.
//!
//! Nesterov uses the parameter-space reformulation
//! `v <- mu v - lr g`, `w <- w + mu v - lr g`, which matches the lookahead
//! gradient form without a second forward pass. Frozen weights and biases of
//! layers that do not learn them are never written and keep zero velocity.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backprop::Gradients;
use crate::error::ShapeError;
use crate::net::Network;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Plain,
    Momentum,
    Nag,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" | "sgd" => Ok(OptimizerKind::Plain),
            "momentum" => Ok(OptimizerKind::Momentum),
            "nag" | "nesterov" => Ok(OptimizerKind::Nag),
            other => Err(format!("unknown optimizer '{other}' (plain, momentum, nag)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Plain => "plain",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nag => "nag",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Plain,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        // zero is accepted: a run that never moves is a useful control
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ShapeError::Rate(self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ShapeError::Rate(self.momentum));
        }
        if self.batch_size == 0 {
            return Err(ShapeError::Geometry("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Velocity buffers mirroring the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Gradients<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        OptimizerState {
            velocity: Gradients::zeros_like(net),
        }
    }
}

#[inline]
fn update<T: Scalar>(w: &mut T, v: &mut T, g: T, kind: OptimizerKind, lr: T, mu: T) {
    match kind {
        OptimizerKind::Plain => *w -= lr * g,
        OptimizerKind::Momentum => {
            *v = mu * *v - lr * g;
            *w += *v;
        }
        OptimizerKind::Nag => {
            *v = mu * *v - lr * g;
            *w += mu * *v - lr * g;
        }
    }
}

/// Applies one update with the (already batch-averaged) gradient.
pub fn step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<(), ShapeError> {
    grads.check_shape(net)?;
    state.velocity.check_shape(net)?;
    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);
    for ((layer, g), v) in net
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        let (Some(bank), Some(g), Some(v)) = (layer.bank.as_mut(), g, v) else {
            continue;
        };
        let frozen = layer.frozen.as_ref();
        for (i, ((w, vel), &gw)) in bank.weights.iter_mut().zip(&mut v.weights).zip(&g.weights).enumerate() {
            if frozen.is_some_and(|m| m.is_selected(i)) {
                continue;
            }
            update(w, vel, gw, config.kind, lr, mu);
        }
        if bank.bias_learning {
            for ((b, vel), &gb) in bank.biases.iter_mut().zip(&mut v.biases).zip(&g.biases) {
                update(b, vel, gb, config.kind, lr, mu);
            }
        }
    }
    Ok(())
}

/// Shuffled partition of `0..count` into batches of `batch_size`; the last
/// batch may be short.
pub fn minibatch_iter<R: Rng + ?Sized>(count: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

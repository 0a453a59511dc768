//! Amplitude-controlled uniform initialization and the magnitude bounds it implies.
//!
//! Layer `n` (counting parameterized layers from 1) draws weights from
//! `[-W_n/(v_n h_n), W_n/(v_n h_n)]` and biases from `[-B_n, B_n]`. With
//! inputs in `[0, 1]` and identity activations this gives
//!
//! * input map of layer `n >= 2`: `|In| <= prod_{k<n} (B_k + W_k)`,
//! * last-layer weight derivative: `max|dL/dN| * prod_{k<last} (B_k + W_k)`,
//! * inner layer `2 <= n < last`: `W_{n+1} * prod_{k<=n} (B_k + W_k)`,
//! * first layer: `W_2`.
//!
//! The first-layer expression does not carry the product over deeper
//! layers that the middle case has; it is exact only for two-layer
//! networks and is implemented as stated. The input-map bound assumes each
//! output sums over a single input channel and that every partial product
//! is at least 1 (or the biases are zero); outside that regime it is an
//! estimate rather than a guarantee.

use rand::Rng;

use crate::error::ShapeError;
use crate::net::Network;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitude {
    pub weight: f64,
    pub bias: f64,
}

impl Amplitude {
    pub fn new(weight: f64, bias: f64) -> Self {
        Amplitude { weight, bias }
    }
}

/// One `(W, B)` pair per parameterized layer, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct InitAmplitudes {
    pairs: Vec<Amplitude>,
}

impl InitAmplitudes {
    pub fn new(pairs: Vec<Amplitude>) -> Result<Self, ShapeError> {
        if let Some(p) = pairs
            .iter()
            .find(|p| !(p.weight >= 0.0 && p.bias >= 0.0 && p.weight.is_finite() && p.bias.is_finite()))
        {
            return Err(ShapeError::Geometry(format!(
                "amplitudes must be finite and non-negative, got W={} B={}",
                p.weight, p.bias
            )));
        }
        Ok(InitAmplitudes { pairs })
    }

    pub fn uniform(count: usize, weight: f64, bias: f64) -> Self {
        InitAmplitudes {
            pairs: vec![Amplitude::new(weight, bias); count],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Amplitude] {
        &self.pairs
    }

    /// Amplitude of parameterized layer `n`, counted from 1.
    pub fn get(&self, n: usize) -> Result<Amplitude, ShapeError> {
        self.check(n)?;
        Ok(self.pairs[n - 1])
    }

    pub fn set(&mut self, n: usize, amp: Amplitude) -> Result<(), ShapeError> {
        self.check(n)?;
        self.pairs[n - 1] = amp;
        Ok(())
    }

    fn check(&self, n: usize) -> Result<(), ShapeError> {
        if n == 0 || n > self.pairs.len() {
            return Err(ShapeError::Index {
                index: n,
                max: self.pairs.len(),
            });
        }
        Ok(())
    }

    fn product_through(&self, n: usize) -> f64 {
        self.pairs[..n].iter().map(|p| p.bias + p.weight).product()
    }
}

fn symmetric_draw<R: Rng + ?Sized>(half: f64, rng: &mut R) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        (half * (2.0 * rng.gen::<f64>() - 1.0)).clamp(-half, half)
    }
}

/// Draws every weight and bias independently from its layer's interval.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    amps: &InitAmplitudes,
    rng: &mut R,
) -> Result<(), ShapeError> {
    let layers = net.param_layers();
    if layers.len() != amps.len() {
        return Err(ShapeError::Length {
            expected: layers.len(),
            actual: amps.len(),
        });
    }
    for (idx, amp) in layers.into_iter().zip(amps.pairs()) {
        let bank = net.layers_mut()[idx].bank.as_mut().expect("param layer");
        let d = bank.dims();
        let half = amp.weight / (d.v * d.h) as f64;
        for w in &mut bank.weights {
            *w = T::lit(symmetric_draw(half, rng));
        }
        for b in &mut bank.biases {
            *b = T::lit(symmetric_draw(amp.bias, rng));
        }
    }
    Ok(())
}

/// Bound on the magnitude of layer `n`'s input map elements.
pub fn input_map_bound(amps: &InitAmplitudes, n: usize) -> Result<f64, ShapeError> {
    amps.check(n)?;
    Ok(if n == 1 { 1.0 } else { amps.product_through(n - 1) })
}

/// Bound on `|dLoss/dw|` for the weights of layer `n`.
///
/// `max_loss_grad` is the largest `|dLoss/dN|` on the output neurons
/// (`1/K` for MAE over `K` outputs).
pub fn weight_derivative_bound(
    amps: &InitAmplitudes,
    n: usize,
    max_loss_grad: f64,
) -> Result<f64, ShapeError> {
    amps.check(n)?;
    let last = amps.len();
    Ok(if n == last {
        max_loss_grad * amps.product_through(last - 1)
    } else if n == 1 {
        amps.pairs[1].weight
    } else {
        amps.pairs[n].weight * amps.product_through(n)
    })
}

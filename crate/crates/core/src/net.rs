//! Layer chains, activations, losses and the forward pass.
//!
//! A dense layer is a convolution whose filter covers its whole input map,
//! so every parameterized layer is backed by a [`FilterBank`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::ShapeError;
use crate::regularize::{dropout_scales, sample_mask, Mode, RegularizerSpec, Resample, WeightMask};
use crate::scalar::Scalar;
use crate::tensor::{
    convolve_masked, max_pool, output_shape, pool_shape, BankDims, ConvGeometry, Dims, FeatureMap,
    FilterBank, PoolProvenance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    BipolarSigmoid,
}

impl Activation {
    /// Value and derivative at `x`. The ReLU derivative at 0 is taken as 0.
    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> (T, T) {
        let one = T::one();
        match self {
            Activation::Identity => (x, one),
            Activation::Relu => {
                if x > T::zero() {
                    (x, one)
                } else {
                    (T::zero(), T::zero())
                }
            }
            Activation::Sigmoid => {
                let s = one / (one + (-x).exp());
                (s, s * (one - s))
            }
            Activation::BipolarSigmoid => {
                let two = one + one;
                let y = two / (one + (-x).exp()) - one;
                (y, (one - y * y) / two)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "bipolar_sigmoid" => Ok(Activation::BipolarSigmoid),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::BipolarSigmoid => "bipolar_sigmoid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    Mse,
    Mae,
    CrossEntropy,
}

impl FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(Loss::Mse),
            "mae" => Ok(Loss::Mae),
            "cross_entropy" => Ok(Loss::CrossEntropy),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Mse => "mse",
            Loss::Mae => "mae",
            Loss::CrossEntropy => "cross_entropy",
        })
    }
}

/// Probability floor applied before the logarithm in cross-entropy.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

fn check_lengths(output: usize, target: usize) -> Result<(), ShapeError> {
    if output != target {
        return Err(ShapeError::Dims {
            expected: format!("{output} targets"),
            actual: format!("{target}"),
        });
    }
    Ok(())
}

/// Mean-normalized MSE/MAE, or cross-entropy of a probability vector.
pub fn loss_eval<T: Scalar>(loss: Loss, output: &[T], target: &[T]) -> Result<T, ShapeError> {
    check_lengths(output.len(), target.len())?;
    let k = T::lit(output.len() as f64);
    Ok(match loss {
        Loss::Mse => {
            output
                .iter()
                .zip(target)
                .map(|(&o, &t)| (o - t) * (o - t))
                .sum::<T>()
                / k
        }
        Loss::Mae => output.iter().zip(target).map(|(&o, &t)| (o - t).abs()).sum::<T>() / k,
        Loss::CrossEntropy => {
            let floor = T::lit(PROBABILITY_FLOOR);
            // `0 - x` rather than `-x` so a perfect prediction reports +0
            T::zero()
                - output
                .iter()
                .zip(target)
                .map(|(&o, &t)| t * o.max(floor).ln())
                .sum::<T>()
        }
    })
}

/// Derivative of a mean-normalized loss with respect to each output.
fn loss_derivative<T: Scalar>(loss: Loss, output: &[T], target: &[T]) -> Vec<T> {
    let k = T::lit(output.len() as f64);
    output
        .iter()
        .zip(target)
        .map(|(&o, &t)| match loss {
            Loss::Mse => (T::one() + T::one()) * (o - t) / k,
            Loss::Mae => {
                let d = o - t;
                if d > T::zero() {
                    T::one() / k
                } else if d < T::zero() {
                    -T::one() / k
                } else {
                    T::zero()
                }
            }
            Loss::CrossEntropy => -t / o.max(T::lit(PROBABILITY_FLOOR)),
        })
        .collect()
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        v: usize,
        h: usize,
        geom: ConvGeometry,
        activation: Activation,
        bias_learning: bool,
    },
    MaxPool {
        window_v: usize,
        window_h: usize,
        stride_v: usize,
        stride_h: usize,
    },
    Dense {
        units: usize,
        activation: Activation,
        bias_learning: bool,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub regularizers: Vec<RegularizerSpec>,
}

impl LayerSpec {
    pub fn conv(filters: usize, v: usize, h: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv {
                filters,
                v,
                h,
                geom: ConvGeometry::default(),
                activation,
                bias_learning: true,
            },
            regularizers: Vec::new(),
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense {
                units,
                activation,
                bias_learning: true,
            },
            regularizers: Vec::new(),
        }
    }

    pub fn max_pool(window_v: usize, window_h: usize, stride_v: usize, stride_h: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool {
                window_v,
                window_h,
                stride_v,
                stride_h,
            },
            regularizers: Vec::new(),
        }
    }

    pub fn softmax() -> Self {
        LayerSpec {
            kind: LayerKind::Softmax,
            regularizers: Vec::new(),
        }
    }

    /// Replaces the convolution geometry. No effect on other layer kinds.
    pub fn with_geometry(mut self, g: ConvGeometry) -> Self {
        if let LayerKind::Conv { geom, .. } = &mut self.kind {
            *geom = g;
        }
        self
    }

    pub fn with_bias_learning(mut self, learn: bool) -> Self {
        match &mut self.kind {
            LayerKind::Conv { bias_learning, .. } | LayerKind::Dense { bias_learning, .. } => {
                *bias_learning = learn
            }
            _ => {}
        }
        self
    }

    pub fn with_regularizer(mut self, r: RegularizerSpec) -> Self {
        self.regularizers.push(r);
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub fn activation(&self) -> Option<Activation> {
        match self.kind {
            LayerKind::Conv { activation, .. } | LayerKind::Dense { activation, .. } => {
                Some(activation)
            }
            _ => None,
        }
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        self.regularizers.iter().find_map(|r| match *r {
            RegularizerSpec::Dropout { rate } => Some(rate),
            _ => None,
        })
    }

    pub fn dropconnect_rate(&self) -> Option<f64> {
        self.regularizers.iter().find_map(|r| match *r {
            RegularizerSpec::Dropconnect { rate } => Some(rate),
            _ => None,
        })
    }

    pub fn freezeconnect(&self) -> Option<(f64, Resample)> {
        self.regularizers.iter().find_map(|r| match *r {
            RegularizerSpec::Freezeconnect { rate, resample } => Some((rate, resample)),
            _ => None,
        })
    }
}

/// A materialized layer: its spec, resolved shapes and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub input_dims: Dims,
    pub output_dims: Dims,
    pub geom: ConvGeometry,
    pub bank: Option<FilterBank<T>>,
    /// Freezeconnect selection: these weights take part in the forward
    /// pass but are never updated.
    pub frozen: Option<WeightMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    loss: Loss,
    input_dims: Dims,
}

/// Regularizer masks drawn for one forward pass of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerMasks<T> {
    pub dropconnect: Option<WeightMask>,
    pub dropout: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub input: FeatureMap<T>,
    pub pre: FeatureMap<T>,
    pub output: FeatureMap<T>,
    pub provenance: Option<PoolProvenance>,
    pub masks: LayerMasks<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &FeatureMap<T> {
        &self.layers.last().expect("non-empty trace").output
    }

    pub fn masks(&self) -> Vec<LayerMasks<T>> {
        self.layers.iter().map(|l| l.masks.clone()).collect()
    }
}

fn layer_err(layer: usize, reason: impl Into<String>) -> ShapeError {
    ShapeError::Layer {
        layer,
        reason: reason.into(),
    }
}

/// Validates the chain and allocates zero-filled banks.
pub fn build_network<T: Scalar>(
    specs: &[LayerSpec],
    loss: Loss,
    input_dims: Dims,
) -> Result<Network<T>, ShapeError> {
    if specs.is_empty() {
        return Err(ShapeError::Geometry("a network needs at least one layer".into()));
    }
    if input_dims.is_empty() {
        return Err(ShapeError::Geometry(format!("empty input dims {input_dims}")));
    }
    let last = specs.len() - 1;
    if let Some(i) = specs[..last]
        .iter()
        .position(|s| matches!(s.kind, LayerKind::Softmax))
    {
        return Err(ShapeError::LossMismatch(format!(
            "softmax must be the last layer (found at layer {})",
            i + 1
        )));
    }
    let ends_in_softmax = matches!(specs[last].kind, LayerKind::Softmax);
    if loss == Loss::CrossEntropy && !ends_in_softmax {
        return Err(ShapeError::LossMismatch(
            "cross-entropy needs a softmax last layer".into(),
        ));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let mut dims = input_dims;
    for (i, spec) in specs.iter().enumerate() {
        for r in &spec.regularizers {
            r.validate().map_err(|e| layer_err(i + 1, e.to_string()))?;
            let weight_policy = !matches!(r, RegularizerSpec::Dropout { .. });
            if weight_policy && !spec.has_params() {
                return Err(layer_err(i + 1, "weight regularizers need a conv or dense layer"));
            }
            if matches!(spec.kind, LayerKind::Softmax) {
                return Err(layer_err(i + 1, "softmax takes no regularizers"));
            }
        }
        let (out, geom, bank) = match spec.kind {
            LayerKind::Conv {
                filters,
                v,
                h,
                geom,
                bias_learning,
                ..
            } => {
                let bd = BankDims {
                    out_channels: filters,
                    in_channels: dims.channels,
                    v,
                    h,
                };
                let out = output_shape(dims, bd, geom).map_err(|e| layer_err(i + 1, e.to_string()))?;
                (out, geom, Some(FilterBank::zeros(bd, bias_learning)))
            }
            LayerKind::Dense {
                units,
                bias_learning,
                ..
            } => {
                if units == 0 {
                    return Err(layer_err(i + 1, "dense layer needs at least one unit"));
                }
                let bd = BankDims {
                    out_channels: units,
                    in_channels: dims.channels,
                    v: dims.rows,
                    h: dims.cols,
                };
                let geom = ConvGeometry::default();
                (Dims::new(units, 1, 1), geom, Some(FilterBank::zeros(bd, bias_learning)))
            }
            LayerKind::MaxPool {
                window_v,
                window_h,
                stride_v,
                stride_h,
            } => {
                let out = pool_shape(dims, window_v, window_h, stride_v, stride_h)
                    .map_err(|e| layer_err(i + 1, e.to_string()))?;
                (out, ConvGeometry::default(), None)
            }
            LayerKind::Softmax => (dims, ConvGeometry::default(), None),
        };
        layers.push(Layer {
            spec: spec.clone(),
            input_dims: dims,
            output_dims: out,
            geom,
            bank,
            frozen: None,
        });
        dims = out;
    }
    Ok(Network {
        layers,
        loss,
        input_dims,
    })
}

impl<T: Scalar> Network<T> {
    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn output_dims(&self) -> Dims {
        self.layers.last().expect("non-empty network").output_dims
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Network indices (0-based) of layers carrying a filter bank.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.bank.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Draws fresh freeze masks for freezeconnect layers whose resampling
    /// schedule is `schedule` (every freezeconnect layer when `None`).
    pub fn sample_freeze_masks<R: Rng + ?Sized>(&mut self, schedule: Option<Resample>, rng: &mut R) {
        for layer in &mut self.layers {
            let (Some((rate, resample)), Some(bank)) = (layer.spec.freezeconnect(), &layer.bank) else {
                continue;
            };
            if schedule.is_none_or(|s| s == resample) {
                layer.frozen = Some(sample_mask(bank.weights.len(), rate, rng));
            }
        }
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(
            self.layers.last().map(|l| l.spec.kind),
            Some(LayerKind::Softmax)
        )
    }

    /// Index of the layer whose output the loss-output gradient refers to:
    /// the last layer, or the one feeding the softmax.
    pub fn sensitivity_layer(&self) -> usize {
        if self.ends_in_softmax() && self.layers.len() > 1 {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        }
    }

    fn run_layer(
        &self,
        index: usize,
        input: FeatureMap<T>,
        masks: LayerMasks<T>,
    ) -> Result<LayerTrace<T>, ShapeError> {
        let layer = &self.layers[index];
        let (pre, provenance) = match layer.spec.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let bank = layer.bank.as_ref().expect("parameterized layer has a bank");
                (
                    convolve_masked(&input, bank, masks.dropconnect.as_ref(), &layer.geom)?,
                    None,
                )
            }
            LayerKind::MaxPool {
                window_v,
                window_h,
                stride_v,
                stride_h,
            } => {
                let (m, p) = max_pool(&input, window_v, window_h, stride_v, stride_h)?;
                (m, Some(p))
            }
            LayerKind::Softmax => (input.clone(), None),
        };
        let mut out: Vec<T> = match layer.spec.kind {
            LayerKind::Softmax => softmax(pre.values()),
            _ => match layer.spec.activation() {
                Some(Activation::Identity) | None => pre.values().to_vec(),
                Some(a) => pre.values().iter().map(|&x| a.eval(x).0).collect(),
            },
        };
        if let Some(scales) = &masks.dropout {
            if scales.len() != out.len() {
                return Err(layer_err(index + 1, "dropout mask length mismatch"));
            }
            for (o, &s) in out.iter_mut().zip(scales) {
                *o *= s;
            }
        }
        let output = FeatureMap::from_raw(pre.dims(), out);
        Ok(LayerTrace {
            input,
            pre,
            output,
            provenance,
            masks,
        })
    }

    fn check_input(&self, input: &FeatureMap<T>) -> Result<(), ShapeError> {
        if input.dims() != self.input_dims {
            return Err(ShapeError::Dims {
                expected: self.input_dims.to_string(),
                actual: input.dims().to_string(),
            });
        }
        Ok(())
    }

    /// Full forward pass. In train mode dropout and dropconnect masks are
    /// drawn from `rng` and recorded in the trace.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &FeatureMap<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace<T>, ShapeError> {
        self.check_input(input)?;
        let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut masks = LayerMasks::default();
            if mode == Mode::Train {
                if let (Some(rate), Some(bank)) = (layer.spec.dropconnect_rate(), &layer.bank) {
                    masks.dropconnect = Some(sample_mask(bank.weights.len(), rate, rng));
                }
                if let Some(rate) = layer.spec.dropout_rate() {
                    if rate > 0.0 {
                        masks.dropout = Some(dropout_scales(layer.output_dims.len(), rate, rng));
                    }
                }
            }
            let x = traces.last().map_or_else(|| input.clone(), |t| t.output.clone());
            traces.push(self.run_layer(i, x, masks)?);
        }
        Ok(ForwardTrace { layers: traces })
    }

    /// Forward pass reusing previously drawn regularizer masks.
    pub fn forward_replay(
        &self,
        input: &FeatureMap<T>,
        masks: &[LayerMasks<T>],
    ) -> Result<ForwardTrace<T>, ShapeError> {
        self.check_input(input)?;
        if masks.len() != self.layers.len() {
            return Err(ShapeError::Dims {
                expected: format!("{} layer masks", self.layers.len()),
                actual: masks.len().to_string(),
            });
        }
        let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(self.layers.len());
        for (i, m) in masks.iter().enumerate() {
            let x = traces.last().map_or_else(|| input.clone(), |t| t.output.clone());
            traces.push(self.run_layer(i, x, m.clone())?);
        }
        Ok(ForwardTrace { layers: traces })
    }

    /// Inference-mode output.
    pub fn predict(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>, ShapeError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for i in 0..self.layers.len() {
            x = self.run_layer(i, x, LayerMasks::default())?.output;
        }
        Ok(x)
    }

    pub fn trace_loss(&self, trace: &ForwardTrace<T>, target: &[T]) -> Result<T, ShapeError> {
        loss_eval(self.loss, trace.output().values(), target)
    }

    /// Loss of one sample under inference mode.
    pub fn sample_loss(&self, input: &FeatureMap<T>, target: &[T]) -> Result<T, ShapeError> {
        loss_eval(self.loss, self.predict(input)?.values(), target)
    }
}

/// dLoss/dN for the neurons of [`Network::sensitivity_layer`].
///
/// A softmax followed by cross-entropy is differentiated as one unit,
/// giving `s - t`. A softmax under any other loss is pushed through its
/// Jacobian.
pub fn loss_output_gradient<T: Scalar>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    target: &[T],
) -> Result<Vec<T>, ShapeError> {
    if trace.layers.len() != net.layers.len() {
        return Err(ShapeError::Dims {
            expected: format!("trace of {} layers", net.layers.len()),
            actual: trace.layers.len().to_string(),
        });
    }
    let out = trace.output().values();
    check_lengths(out.len(), target.len())?;
    if !net.ends_in_softmax() {
        return Ok(loss_derivative(net.loss, out, target));
    }
    if net.loss == Loss::CrossEntropy {
        return Ok(out.iter().zip(target).map(|(&s, &t)| s - t).collect());
    }
    let g = loss_derivative(net.loss, out, target);
    let dot: T = out.iter().zip(&g).map(|(&s, &gi)| s * gi).sum();
    Ok(out.iter().zip(&g).map(|(&s, &gi)| s * (gi - dot)).collect())
}

/// Options shared by the built-in presets.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    pub filters: usize,
    pub filter_v: usize,
    pub filter_h: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub bias_learning: bool,
    pub softmax: bool,
    pub freezeconnect: Option<(f64, Resample)>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            filters: 4,
            filter_v: 5,
            filter_h: 5,
            outputs: 1,
            activation: Activation::Identity,
            bias_learning: false,
            softmax: false,
            freezeconnect: None,
        }
    }
}

/// One convolution followed by one dense layer (and a softmax when classifying).
pub fn shallow_preset(opts: &PresetOptions) -> Vec<LayerSpec> {
    let mut specs = vec![
        LayerSpec::conv(opts.filters, opts.filter_v, opts.filter_h, opts.activation)
            .with_bias_learning(opts.bias_learning),
        LayerSpec::dense(opts.outputs, opts.activation).with_bias_learning(opts.bias_learning),
    ];
    if opts.softmax {
        specs.push(LayerSpec::softmax());
    }
    specs
}

/// Seven-layer chain: four convolutions around a max-pool, then two dense
/// layers. Freezeconnect, when given, is attached to the inner convolutions
/// and the first dense layer.
pub fn deep_preset(opts: &PresetOptions) -> Vec<LayerSpec> {
    let act = opts.activation;
    let freeze = |s: LayerSpec| match opts.freezeconnect {
        Some((rate, resample)) => s.with_regularizer(RegularizerSpec::Freezeconnect { rate, resample }),
        None => s,
    };
    let mut specs = vec![
        LayerSpec::conv(opts.filters, opts.filter_v, opts.filter_h, act),
        freeze(LayerSpec::conv(opts.filters, 3, 3, act)),
        LayerSpec::max_pool(2, 2, 2, 2),
        freeze(LayerSpec::conv(opts.filters * 2, 3, 3, act)),
        freeze(LayerSpec::conv(opts.filters * 2, 3, 3, act)),
        freeze(LayerSpec::dense(16, act)),
        LayerSpec::dense(opts.outputs, act),
    ];
    for s in &mut specs {
        *s = s.clone().with_bias_learning(opts.bias_learning);
    }
    if opts.softmax {
        specs.push(LayerSpec::softmax());
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn build_valid_chain() {
        let specs = [
            LayerSpec::conv(2, 3, 3, Activation::Relu),
            LayerSpec::dense(4, Activation::Identity),
            LayerSpec::softmax(),
        ];
        let net = build_network::<f64>(&specs, Loss::CrossEntropy, Dims::new(1, 8, 8)).unwrap();
        assert_eq!(net.layers()[0].output_dims, Dims::new(2, 6, 6));
        assert_eq!(net.layers()[1].bank.as_ref().unwrap().dims().v, 6);
        assert_eq!(net.output_dims(), Dims::new(4, 1, 1));
        assert_eq!(net.param_layers(), vec![0, 1]);
        assert_eq!(net.sensitivity_layer(), 1);
    }

    #[test]
    fn build_rejects_bad_chains() {
        let r = build_network::<f64>(
            &[LayerSpec::softmax(), LayerSpec::dense(4, Activation::Identity)],
            Loss::Mse,
            Dims::new(1, 4, 4),
        );
        assert!(matches!(r, Err(ShapeError::LossMismatch(_))));

        let r = build_network::<f64>(&[LayerSpec::conv(1, 9, 9, Activation::Identity)], Loss::Mse, Dims::new(1, 4, 4));
        assert!(matches!(r, Err(ShapeError::Layer { layer: 1, .. })));

        let r = build_network::<f64>(&[LayerSpec::dense(3, Activation::Identity)], Loss::CrossEntropy, Dims::new(1, 4, 4));
        assert!(matches!(r, Err(ShapeError::LossMismatch(_))));

        let r = build_network::<f64>(&[], Loss::Mse, Dims::new(1, 4, 4));
        assert!(r.is_err());

        let r = build_network::<f64>(
            &[LayerSpec::max_pool(2, 2, 2, 2).with_regularizer(RegularizerSpec::Dropconnect { rate: 0.5 })],
            Loss::Mse,
            Dims::new(1, 4, 4),
        );
        assert!(matches!(r, Err(ShapeError::Layer { layer: 1, .. })));
    }

    fn one_by_one_chain(w1: f64, w2: f64) -> Network<f64> {
        let specs = [
            LayerSpec::conv(1, 1, 1, Activation::Identity),
            LayerSpec::conv(1, 1, 1, Activation::Identity),
        ];
        let mut net = build_network(&specs, Loss::Mse, Dims::new(1, 1, 1)).unwrap();
        net.layers_mut()[0].bank.as_mut().unwrap().weights[0] = w1;
        net.layers_mut()[1].bank.as_mut().unwrap().weights[0] = w2;
        net
    }

    #[test]
    fn forward_hand_chain() {
        let net = one_by_one_chain(3.0, 4.0);
        let x = FeatureMap::new(Dims::new(1, 1, 1), vec![2.0]).unwrap();
        let t = net.forward(&x, Mode::Train, &mut rng()).unwrap();
        assert_eq!(t.layers[0].output.values(), &[6.0]);
        assert_eq!(t.layers[1].output.values(), &[24.0]);
        assert_eq!(net.predict(&x).unwrap().values(), &[24.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let specs = [LayerSpec::conv(3, 2, 2, Activation::Identity), LayerSpec::dense(2, Activation::Identity)];
        let net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 5, 5)).unwrap();
        let x = FeatureMap::from_fn(Dims::new(1, 5, 5), |_, r, c| (r + c) as f64 / 8.0);
        assert!(net.predict(&x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = one_by_one_chain(1.0, 1.0);
        let x = FeatureMap::<f64>::zeros(Dims::new(1, 2, 1));
        assert!(matches!(net.forward(&x, Mode::Inference, &mut rng()), Err(ShapeError::Dims { .. })));
    }

    #[test]
    fn softmax_of_equal_inputs() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Identity.eval(-3.7f64), (-3.7, 1.0));
        assert_eq!(Activation::BipolarSigmoid.eval(0.0f64), (0.0, 0.5));
        assert_eq!(Activation::Relu.eval(-1.0f64), (0.0, 0.0));
        assert_eq!(Activation::Relu.eval(0.0f64), (0.0, 0.0));
        assert_eq!(Activation::Sigmoid.eval(0.0f64), (0.5, 0.25));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_eval(Loss::Mse, &[3.0f64], &[1.0]).unwrap(), 4.0);
        assert_eq!(loss_eval(Loss::Mae, &[2.0f64, 4.0], &[1.0, 1.0]).unwrap(), 2.0);
        let ce = loss_eval(Loss::CrossEntropy, &[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!(ce.abs() < 1e-11);
        assert!(loss_eval(Loss::Mse, &[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_gradient_examples() {
        let net = one_by_one_chain(1.0, 3.0);
        let x = FeatureMap::new(Dims::new(1, 1, 1), vec![1.0]).unwrap();
        let t = net.forward(&x, Mode::Inference, &mut rng()).unwrap();
        assert_eq!(loss_output_gradient(&net, &t, &[1.0]).unwrap(), vec![4.0]);

        let specs = [LayerSpec::dense(2, Activation::Identity), LayerSpec::softmax()];
        let net = build_network::<f64>(&specs, Loss::CrossEntropy, Dims::new(1, 1, 1)).unwrap();
        let t = net.forward(&x, Mode::Inference, &mut rng()).unwrap();
        assert_eq!(t.output().values(), &[0.5, 0.5]);
        assert_eq!(loss_output_gradient(&net, &t, &[1.0, 0.0]).unwrap(), vec![-0.5, 0.5]);

        let mut mae = one_by_one_chain(1.0, 2.0);
        mae.loss = Loss::Mae;
        let t = mae.forward(&x, Mode::Inference, &mut rng()).unwrap();
        assert_eq!(loss_output_gradient(&mae, &t, &[2.0]).unwrap(), vec![0.0]);
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn activation_derivatives_match_central_differences(x in -6.0f64..6.0) {
            for a in [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::BipolarSigmoid] {
                if a == Activation::Relu && x.abs() < 1e-3 {
                    continue;
                }
                let (_, d) = a.eval(x);
                let fd = central(|z| a.eval(z).0, x);
                prop_assert!((d - fd).abs() <= 1e-6 * d.abs().max(fd.abs()).max(1e-3), "{a}: {d} vs {fd}");
            }
        }

        #[test]
        fn softmax_is_a_shift_invariant_distribution(v in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
            let s = softmax(&v);
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&p| p > 0.0 && p <= 1.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in s.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn losses_are_non_negative(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..10)) {
            let (o, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(loss_eval(Loss::Mse, &o, &t).unwrap() >= 0.0);
            prop_assert!(loss_eval(Loss::Mae, &o, &t).unwrap() >= 0.0);
            let p = softmax(&o);
            let mut onehot = vec![0.0; p.len()];
            onehot[0] = 1.0;
            prop_assert!(loss_eval(Loss::CrossEntropy, &p, &onehot).unwrap() >= 0.0);
        }

        #[test]
        fn identity_nets_are_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            use rand::Rng;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let specs = [
                LayerSpec::conv(2, 2, 3, Activation::Identity),
                LayerSpec::max_pool(1, 1, 1, 1),
                LayerSpec::conv(3, 2, 2, Activation::Identity),
                LayerSpec::dense(2, Activation::Identity),
            ];
            let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 5, 6)).unwrap();
            for l in net.layers_mut() {
                if let Some(bank) = &mut l.bank {
                    for w in &mut bank.weights {
                        *w = r.gen_range(-1.0..1.0);
                    }
                }
            }
            let d = net.input_dims();
            let x = FeatureMap::from_fn(d, |_, _, _| r.gen::<f64>());
            let y = FeatureMap::from_fn(d, |_, _, _| r.gen::<f64>());
            let xy = FeatureMap::new(d, x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = net.predict(&xy).unwrap();
            let px = net.predict(&x).unwrap();
            let py = net.predict(&y).unwrap();
            for ((l, p), q) in lhs.values().iter().zip(px.values()).zip(py.values()) {
                let rhs = a * p + b * q;
                prop_assert!((l - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn presets_build() {
        let opts = PresetOptions { outputs: 3, softmax: true, ..Default::default() };
        let shallow = build_network::<f64>(&shallow_preset(&opts), Loss::CrossEntropy, Dims::new(1, 36, 58)).unwrap();
        assert_eq!(shallow.param_layers().len(), 2);
        let opts = PresetOptions { freezeconnect: Some((0.3, Resample::PerRun)), ..opts };
        let deep = build_network::<f64>(&deep_preset(&opts), Loss::CrossEntropy, Dims::new(1, 36, 58)).unwrap();
        assert_eq!(deep.layers().len(), 8);
        assert_eq!(deep.output_dims(), Dims::new(3, 1, 1));
    }
}

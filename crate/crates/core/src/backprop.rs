//! Backpropagation and the finite-difference oracle it is checked against.
//!
//! For the last layer the weight gradient is
//! `sum over beta of In[alpha(beta)] * N'[beta] * dLoss/dN[beta]`, where beta
//! runs over every output neuron the weight contributes to. Inner layers
//! receive the same form with `dLoss/dN` replaced by the sensitivity pushed
//! back through the next layer's weights and activation derivatives, which
//! is the recursive form of the adjacent-layer expression. Bias gradients
//! are the same sums without the input factor.

use crate::error::ShapeError;
use crate::net::{loss_output_gradient, ForwardTrace, LayerKind, LayerMasks, Network};
use crate::regularize::Mode;
use crate::scalar::Scalar;
use crate::tensor::{convolve_backward, FeatureMap};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

/// Per-layer parameter gradients; `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Address of a single parameter: 0-based network layer index plus the
/// flat index inside that layer's weights or biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamLocation {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

impl std::fmt::Display for ParamLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
        };
        write!(f, "layer {} {} {}", self.layer + 1, kind, self.index)
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    l.bank.as_ref().map(|b| ParamGrad {
                        weights: vec![T::zero(); b.weights.len()],
                        biases: vec![T::zero(); b.biases.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                    *x += *y;
                }
                for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                    *x += *y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.iter_mut().chain(g.biases.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// Mean of per-sample gradients, accumulated in slice order.
    pub fn mean(parts: &[Gradients<T>]) -> Option<Gradients<T>> {
        let (first, rest) = parts.split_first()?;
        let mut acc = first.clone();
        for g in rest {
            acc.add_assign(g);
        }
        acc.scale(T::one() / T::lit(parts.len() as f64));
        Some(acc)
    }

    pub fn get(&self, loc: ParamLocation) -> Option<T> {
        let g = self.layers.get(loc.layer)?.as_ref()?;
        match loc.kind {
            ParamKind::Weight => g.weights.get(loc.index).copied(),
            ParamKind::Bias => g.biases.get(loc.index).copied(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamLocation, T)> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, g)| {
            g.iter().flat_map(move |g| {
                let w = g.weights.iter().enumerate().map(move |(index, &v)| {
                    (ParamLocation { layer, kind: ParamKind::Weight, index }, v)
                });
                let b = g.biases.iter().enumerate().map(move |(index, &v)| {
                    (ParamLocation { layer, kind: ParamKind::Bias, index }, v)
                });
                w.chain(b)
            })
        })
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, v)| v.is_finite())
    }

    fn same_shape(&self, net: &Network<T>) -> bool {
        self.layers.len() == net.layers().len()
            && self.layers.iter().zip(net.layers()).all(|(g, l)| match (g, &l.bank) {
                (Some(g), Some(b)) => g.weights.len() == b.weights.len() && g.biases.len() == b.biases.len(),
                (None, None) => true,
                _ => false,
            })
    }

    pub(crate) fn check_shape(&self, net: &Network<T>) -> Result<(), ShapeError> {
        if self.same_shape(net) {
            Ok(())
        } else {
            Err(ShapeError::Dims {
                expected: "gradients shaped like the network".into(),
                actual: "mismatched gradients".into(),
            })
        }
    }
}

/// Gradients plus the per-neuron pre-activation sensitivities
/// `N'[beta] * dLoss/dN[beta]` (the per-neuron bias derivative) of every
/// layer up to the sensitivity layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput<T> {
    pub grads: Gradients<T>,
    pub neuron_sensitivity: Vec<Vec<T>>,
}

fn check_trace<T: Scalar>(net: &Network<T>, trace: &ForwardTrace<T>) -> Result<(), ShapeError> {
    let ok = trace.layers.len() == net.layers().len()
        && trace
            .layers
            .iter()
            .zip(net.layers())
            .all(|(t, l)| t.input.dims() == l.input_dims && t.output.dims() == l.output_dims);
    if ok {
        Ok(())
    } else {
        Err(ShapeError::Dims {
            expected: "trace produced by this network".into(),
            actual: format!("trace of {} layers", trace.layers.len()),
        })
    }
}

pub fn backward<T: Scalar>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    target: &[T],
) -> Result<Gradients<T>, ShapeError> {
    Ok(backward_detailed(net, trace, target)?.grads)
}

pub fn backward_detailed<T: Scalar>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    target: &[T],
) -> Result<BackwardOutput<T>, ShapeError> {
    check_trace(net, trace)?;
    let start = net.sensitivity_layer();
    let mut upstream = loss_output_gradient(net, trace, target)?;
    let mut grads = Gradients::zeros_like(net);
    let mut sensitivity = vec![Vec::new(); net.layers().len()];
    for n in (0..=start).rev() {
        let layer = &net.layers()[n];
        let lt = &trace.layers[n];
        if let Some(scales) = &lt.masks.dropout {
            for (g, &s) in upstream.iter_mut().zip(scales) {
                *g *= s;
            }
        }
        match layer.spec.kind {
            LayerKind::Conv { activation, .. } | LayerKind::Dense { activation, .. } => {
                let delta: Vec<T> = upstream
                    .iter()
                    .zip(lt.pre.values())
                    .map(|(&g, &x)| g * activation.eval(x).1)
                    .collect();
                let bank = layer.bank.as_ref().expect("parameterized layer has a bank");
                let back = convolve_backward(
                    &lt.input,
                    bank,
                    lt.masks.dropconnect.as_ref(),
                    &layer.geom,
                    &delta,
                    n > 0,
                );
                grads.layers[n] = Some(crate::backprop::ParamGrad {
                    weights: back.weights,
                    biases: back.biases,
                });
                sensitivity[n] = delta;
                upstream = back.input;
            }
            LayerKind::MaxPool { .. } => {
                let prov = lt.provenance.as_ref().expect("pool trace records provenance");
                let mut back = vec![T::zero(); layer.input_dims.len()];
                for (&src, &g) in prov.iter().zip(&upstream) {
                    back[src] += g;
                }
                sensitivity[n] = upstream;
                upstream = back;
            }
            LayerKind::Softmax => unreachable!("softmax is always past the sensitivity layer"),
        }
    }
    Ok(BackwardOutput {
        grads,
        neuron_sensitivity: sensitivity,
    })
}

/// Central-difference gradient of the inference-mode loss.
///
/// Every weight and bias is perturbed, whether or not it learns.
pub fn finite_diff_gradient<T: Scalar>(
    net: &Network<T>,
    input: &FeatureMap<T>,
    target: &[T],
    epsilon: T,
) -> Result<Gradients<T>, ShapeError> {
    let masks = vec![LayerMasks::default(); net.layers().len()];
    finite_diff_gradient_replay(net, input, &masks, target, epsilon)
}

/// [`finite_diff_gradient`] with fixed regularizer masks replayed on every evaluation.
pub fn finite_diff_gradient_replay<T: Scalar>(
    net: &Network<T>,
    input: &FeatureMap<T>,
    masks: &[LayerMasks<T>],
    target: &[T],
    epsilon: T,
) -> Result<Gradients<T>, ShapeError> {
    assert!(epsilon > T::zero(), "epsilon must be positive");
    let mut probe = net.clone();
    let mut grads = Gradients::zeros_like(net);
    let two_eps = epsilon + epsilon;
    let loss_at = |probe: &Network<T>| -> Result<T, ShapeError> {
        let trace = probe.forward_replay(input, masks)?;
        probe.trace_loss(&trace, target)
    };
    for n in net.param_layers() {
        for kind in [ParamKind::Weight, ParamKind::Bias] {
            let count = {
                let bank = net.layers()[n].bank.as_ref().expect("param layer");
                match kind {
                    ParamKind::Weight => bank.weights.len(),
                    ParamKind::Bias => bank.biases.len(),
                }
            };
            for i in 0..count {
                let original = *param_mut(&mut probe, n, kind, i);
                *param_mut(&mut probe, n, kind, i) = original + epsilon;
                let plus = loss_at(&probe)?;
                *param_mut(&mut probe, n, kind, i) = original - epsilon;
                let minus = loss_at(&probe)?;
                *param_mut(&mut probe, n, kind, i) = original;
                let g = grads.layers[n].as_mut().expect("param layer");
                let d = (plus - minus) / two_eps;
                match kind {
                    ParamKind::Weight => g.weights[i] = d,
                    ParamKind::Bias => g.biases[i] = d,
                }
            }
        }
    }
    Ok(grads)
}

fn param_mut<T: Scalar>(net: &mut Network<T>, layer: usize, kind: ParamKind, index: usize) -> &mut T {
    let bank = net.layers_mut()[layer].bank.as_mut().expect("param layer");
    match kind {
        ParamKind::Weight => &mut bank.weights[index],
        ParamKind::Bias => &mut bank.biases[index],
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<ParamLocation>,
    pub parameters_checked: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("gradient check failed: relative error {:.3e} at {}", .0.max_relative_error, .0.worst.map(|w| w.to_string()).unwrap_or_default())]
    CheckFailed(GradCheckReport),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub type BackwardFn<T> =
    dyn Fn(&Network<T>, &ForwardTrace<T>, &[T]) -> Result<Gradients<T>, ShapeError>;

/// Compares [`backward`] against central differences on every sample.
pub fn gradient_check<T: Scalar>(
    net: &Network<T>,
    samples: &[(FeatureMap<T>, Vec<T>)],
    epsilon: T,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError> {
    gradient_check_with(net, samples, epsilon, tolerance, &backward)
}

/// [`gradient_check`] with a caller-supplied analytic gradient, for fault injection.
pub fn gradient_check_with<T: Scalar>(
    net: &Network<T>,
    samples: &[(FeatureMap<T>, Vec<T>)],
    epsilon: T,
    tolerance: f64,
    analytic: &BackwardFn<T>,
) -> Result<GradCheckReport, GradCheckError> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        parameters_checked: 0,
    };
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    for (input, target) in samples {
        let trace = net.forward(input, Mode::Inference, &mut rng)?;
        let a = analytic(net, &trace, target)?;
        let fd = finite_diff_gradient(net, input, target, epsilon)?;
        for ((loc, x), (_, y)) in a.iter().zip(fd.iter()) {
            let e = relative_error(x.as_f64(), y.as_f64());
            report.parameters_checked += 1;
            if e > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = e;
                report.worst = Some(loc);
            }
        }
    }
    if report.max_relative_error < tolerance {
        Ok(report)
    } else {
        Err(GradCheckError::CheckFailed(report))
    }
}

/// Index sets linking weights, inputs and neurons of one layer.
///
/// `weight_links[w]` lists the `(beta, alpha)` pairs for weight `w`: output
/// neuron beta whose convolution multiplies input element alpha by `w`.
/// `neuron_links[beta]` lists the `(gamma, delta)` pairs of the next
/// parameterized layer: weight gamma multiplies neuron beta on its way into
/// neuron delta. Only materialize this for small networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMap {
    pub weight_links: Vec<Vec<(usize, usize)>>,
    pub neuron_links: Vec<Vec<(usize, usize)>>,
}

fn conv_links<T: Scalar>(net: &Network<T>, n: usize) -> Vec<Vec<(usize, usize)>> {
    let layer = &net.layers()[n];
    let bank = layer.bank.as_ref().expect("conv layer");
    let bd = bank.dims();
    let d = layer.input_dims;
    let od = layer.output_dims;
    let g = layer.geom;
    let mut links = vec![Vec::new(); bd.weight_count()];
    for o in 0..od.channels {
        for r in 0..od.rows {
            for c in 0..od.cols {
                let beta = od.index(o, r, c);
                for i in 0..bd.in_channels {
                    for kr in 0..bd.v {
                        for kc in 0..bd.h {
                            let y = (r * g.stride_v + kr) as isize - g.pad_v() as isize;
                            let x = (c * g.stride_h + kc) as isize - g.pad_h() as isize;
                            if y < 0 || x < 0 || y >= d.rows as isize || x >= d.cols as isize {
                                continue;
                            }
                            let alpha = d.index(i, y as usize, x as usize);
                            links[bd.index(o, i, kr, kc)].push((beta, alpha));
                        }
                    }
                }
            }
        }
    }
    links
}

/// Builds the index sets of parameterized layer `n` (0-based network index).
/// `neuron_links` is empty when `n` is not directly followed by another
/// parameterized layer.
pub fn connectivity<T: Scalar>(net: &Network<T>, n: usize) -> Result<ConnectivityMap, ShapeError> {
    if net.layers().get(n).and_then(|l| l.bank.as_ref()).is_none() {
        return Err(ShapeError::Layer {
            layer: n + 1,
            reason: "not a parameterized layer".into(),
        });
    }
    let weight_links = conv_links(net, n);
    let next_is_param = net.layers().get(n + 1).is_some_and(|l| l.bank.is_some());
    let neuron_links = if next_is_param {
        let mut links = vec![Vec::new(); net.layers()[n].output_dims.len()];
        for (gamma, pairs) in conv_links(net, n + 1).into_iter().enumerate() {
            for (delta, beta) in pairs {
                links[beta].push((gamma, delta));
            }
        }
        links
    } else {
        Vec::new()
    };
    Ok(ConnectivityMap {
        weight_links,
        neuron_links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, Activation, LayerSpec, Loss};
    use crate::regularize::{RegularizerSpec, Resample};
    use crate::tensor::{ConvGeometry, Dims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(w1: f64, w2: f64, loss: Loss) -> Network<f64> {
        let specs = [
            LayerSpec::conv(1, 1, 1, Activation::Identity),
            LayerSpec::conv(1, 1, 1, Activation::Identity),
        ];
        let mut net = build_network(&specs, loss, Dims::new(1, 1, 1)).unwrap();
        net.layers_mut()[0].bank.as_mut().unwrap().weights[0] = w1;
        net.layers_mut()[1].bank.as_mut().unwrap().weights[0] = w2;
        net
    }

    fn trace(net: &Network<f64>, x: &FeatureMap<f64>) -> ForwardTrace<f64> {
        net.forward(x, Mode::Inference, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn scalar(v: f64) -> FeatureMap<f64> {
        FeatureMap::new(Dims::new(1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn hand_chain_rule() {
        let net = chain(3.0, 4.0, Loss::Mse);
        let x = scalar(2.0);
        let t = trace(&net, &x);
        assert_eq!(t.output().values(), &[24.0]);
        let g = backward(&net, &t, &[0.0]).unwrap();
        assert_eq!(g.layers[1].as_ref().unwrap().weights, vec![288.0]);
        assert_eq!(g.layers[0].as_ref().unwrap().weights, vec![384.0]);
        assert_eq!(g.layers[1].as_ref().unwrap().biases, vec![48.0]);
        assert_eq!(g.layers[0].as_ref().unwrap().biases, vec![192.0]);
    }

    #[test]
    fn zero_output_gradient_means_zero_gradients() {
        let net = chain(3.0, 4.0, Loss::Mae);
        let x = scalar(2.0);
        let g = backward(&net, &trace(&net, &x), &[24.0]).unwrap();
        assert!(g.iter().all(|(_, v)| v == 0.0));
    }

    #[test]
    fn quadratic_single_weight_difference() {
        // loss = (w*1 - 0)^2 with one output: derivative 2w = 6 at w = 3
        let specs = [LayerSpec::conv(1, 1, 1, Activation::Identity)];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 1, 1)).unwrap();
        net.layers_mut()[0].bank.as_mut().unwrap().weights[0] = 3.0;
        let fd = finite_diff_gradient(&net, &scalar(1.0), &[0.0], 1e-4).unwrap();
        assert!((fd.layers[0].as_ref().unwrap().weights[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn zero_network_has_zero_difference_gradient() {
        let specs = [LayerSpec::conv(2, 2, 2, Activation::Identity), LayerSpec::dense(1, Activation::Identity)];
        let net = build_network::<f64>(&specs, Loss::Mae, Dims::new(1, 3, 3)).unwrap();
        let x = FeatureMap::from_fn(Dims::new(1, 3, 3), |_, r, c| (r * c) as f64 / 4.0);
        let fd = finite_diff_gradient(&net, &x, &[0.0], 1e-5).unwrap();
        assert!(fd.iter().all(|(_, v)| v == 0.0));
    }

    fn randomize(net: &mut Network<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        for l in net.layers_mut() {
            if let Some(b) = &mut l.bank {
                b.weights.iter_mut().chain(b.biases.iter_mut()).for_each(|w| *w = rng.gen_range(-scale..scale));
            }
        }
    }

    #[test]
    fn two_layer_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for act in [Activation::Identity, Activation::Sigmoid] {
            let specs = [LayerSpec::conv(2, 3, 3, act), LayerSpec::conv(1, 2, 2, act)];
            let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 6, 5)).unwrap();
            randomize(&mut net, &mut rng, 0.5);
            let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
            let target: Vec<f64> = (0..net.output_dims().len()).map(|_| rng.gen()).collect();
            let report = gradient_check(&net, &[(x, target)], 1e-5, 1e-6).unwrap();
            assert!(report.max_relative_error < 1e-6);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [LayerSpec::conv(2, 2, 2, Activation::Identity), LayerSpec::dense(2, Activation::Identity)];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 4, 4)).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
        let samples = vec![(x, vec![0.3, -0.2])];
        let corrupted = |n: &Network<f64>, t: &ForwardTrace<f64>, y: &[f64]| {
            let mut g = backward(n, t, y)?;
            let w = &mut g.layers[1].as_mut().unwrap().weights[5];
            *w = -*w;
            Ok(g)
        };
        match gradient_check_with(&net, &samples, 1e-5, 1e-5, &corrupted) {
            Err(GradCheckError::CheckFailed(r)) => {
                assert_eq!(r.worst, Some(ParamLocation { layer: 1, kind: ParamKind::Weight, index: 5 }));
                assert!((r.max_relative_error - 1.0).abs() < 1e-9);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn frozen_weights_still_get_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let specs = [
            LayerSpec::conv(2, 2, 2, Activation::Identity)
                .with_regularizer(RegularizerSpec::Freezeconnect { rate: 0.5, resample: Resample::PerRun }),
            LayerSpec::dense(1, Activation::Identity),
        ];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 4, 4)).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        net.layers_mut()[0].frozen = Some(crate::regularize::sample_mask(8, 0.5, &mut rng));
        let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
        let t = trace(&net, &x);
        let g = backward(&net, &t, &[1.0]).unwrap();
        let frozen = net.layers()[0].frozen.clone().unwrap();
        let gw = &g.layers[0].as_ref().unwrap().weights;
        assert!((0..8).filter(|&i| frozen.is_selected(i)).all(|i| gw[i] != 0.0));
        gradient_check(&net, &[(x, vec![1.0])], 1e-5, 1e-6).unwrap();
    }

    #[test]
    fn dropconnect_masked_weights_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let specs = [
            LayerSpec::conv(2, 2, 2, Activation::Sigmoid).with_regularizer(RegularizerSpec::Dropconnect { rate: 0.5 }),
            LayerSpec::max_pool(2, 2, 1, 1).with_regularizer(RegularizerSpec::Dropout { rate: 0.3 }),
            LayerSpec::dense(2, Activation::Identity),
        ];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 5, 5)).unwrap();
        randomize(&mut net, &mut rng, 0.7);
        let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
        let t = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let mask = t.layers[0].masks.dropconnect.clone().unwrap();
        let g = backward(&net, &t, &[0.1, 0.9]).unwrap();
        let gw = &g.layers[0].as_ref().unwrap().weights;
        for i in 0..8 {
            if mask.is_selected(i) {
                assert_eq!(gw[i], 0.0);
            }
        }
        let fd = finite_diff_gradient_replay(&net, &x, &t.masks(), &[0.1, 0.9], 1e-5).unwrap();
        for ((_, a), (_, b)) in g.iter().zip(fd.iter()) {
            assert!(relative_error(a, b) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_output_last_layer_is_one_term_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let specs = [LayerSpec::conv(2, 2, 2, Activation::Identity), LayerSpec::dense(1, Activation::Sigmoid)];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 4, 3)).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
        let t = trace(&net, &x);
        let out = loss_output_gradient(&net, &t, &[0.25]).unwrap();
        let n_prime = Activation::Sigmoid.eval(t.layers[1].pre.values()[0]).1;
        let g = backward(&net, &t, &[0.25]).unwrap();
        for (i, &gw) in g.layers[1].as_ref().unwrap().weights.iter().enumerate() {
            assert_eq!(gw, t.layers[1].input.values()[i] * (out[0] * n_prime));
        }
    }

    #[test]
    fn connectivity_reproduces_gradients_of_two_layer_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            LayerSpec::conv(2, 2, 3, Activation::Sigmoid).with_geometry(ConvGeometry { stride_v: 1, stride_h: 2, zero_pad_v: 1, zero_pad_h: 0, input_pad: 0 }),
            LayerSpec::conv(2, 2, 2, Activation::BipolarSigmoid),
        ];
        let mut net = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 4, 6)).unwrap();
        randomize(&mut net, &mut rng, 0.8);
        let x = FeatureMap::from_fn(net.input_dims(), |_, _, _| rng.gen::<f64>());
        let target: Vec<f64> = (0..net.output_dims().len()).map(|_| rng.gen()).collect();
        let t = trace(&net, &x);
        let g = backward(&net, &t, &target).unwrap();
        let dl_dn = loss_output_gradient(&net, &t, &target).unwrap();
        let act = [Activation::Sigmoid, Activation::BipolarSigmoid];
        let deriv = |n: usize, beta: usize| act[n].eval(t.layers[n].pre.values()[beta]).1;

        // last layer: sum over beta of In[alpha] * N'[beta] * dL/dN[beta]
        let last = connectivity(&net, 1).unwrap();
        assert!(last.neuron_links.is_empty());
        for (w, links) in last.weight_links.iter().enumerate() {
            let eq: f64 = links.iter().map(|&(b, a)| t.layers[1].input.values()[a] * deriv(1, b) * dl_dn[b]).sum();
            let got = g.layers[1].as_ref().unwrap().weights[w];
            assert!((eq - got).abs() <= 1e-12 * (1.0 + got.abs()));
        }

        // first layer: In[alpha] * N'[beta] * sum over (gamma, delta) of w[gamma] * N'[delta] * dL/dN[delta]
        let first = connectivity(&net, 0).unwrap();
        let w2 = &net.layers()[1].bank.as_ref().unwrap().weights;
        for (w, links) in first.weight_links.iter().enumerate() {
            let eq: f64 = links
                .iter()
                .map(|&(b, a)| {
                    let down: f64 = first.neuron_links[b].iter().map(|&(gm, dl)| w2[gm] * deriv(1, dl) * dl_dn[dl]).sum();
                    t.layers[0].input.values()[a] * deriv(0, b) * down
                })
                .sum();
            let got = g.layers[0].as_ref().unwrap().weights[w];
            assert!((eq - got).abs() <= 1e-12 * (1.0 + got.abs()), "{eq} vs {got}");
        }
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let a = chain(1.0, 1.0, Loss::Mse);
        let specs = [LayerSpec::conv(1, 1, 1, Activation::Identity)];
        let b = build_network::<f64>(&specs, Loss::Mse, Dims::new(1, 1, 1)).unwrap();
        let t = trace(&b, &scalar(1.0));
        assert!(backward(&a, &t, &[0.0]).is_err());
    }
}

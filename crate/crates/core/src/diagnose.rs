//! Mean-absolute-value diagnostics after one forward and one backward pass.
//!
//! Each parameterized layer gets the MAV of its input map, activation
//! derivative, weights and per-neuron bias derivative, plus the MAV of the
//! loss-weight derivative, which is the quantity steered into the acceptable
//! window by adjusting initialization amplitudes. Gradients are averaged over
//! the probe batch before taking absolute values, matching what a training
//! step would apply.

use std::fmt::Write as _;

use rand::rngs::mock::StepRng;

use crate::backprop::{backward_detailed, BackwardOutput, Gradients};
use crate::error::ShapeError;
use crate::init::{input_map_bound, weight_derivative_bound, InitAmplitudes};
use crate::net::{loss_output_gradient, Loss, Network};
use crate::parallel::WorkerPool;
use crate::regularize::Mode;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub const DEFAULT_PROBE_SIZE: usize = 32;

/// Acceptable range for the loss-weight derivative MAV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagWindow {
    pub low: f64,
    pub high: f64,
}

impl Default for DiagWindow {
    fn default() -> Self {
        DiagWindow {
            low: 0.01,
            high: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Low,
    Ok,
    High,
}

impl DiagWindow {
    pub fn classify(&self, value: f64) -> Flag {
        if value < self.low {
            Flag::Low
        } else if value > self.high {
            Flag::High
        } else {
            Flag::Ok
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    /// Position among parameterized layers, from 1.
    pub param_layer: usize,
    /// Position in the full layer list, from 1.
    pub network_layer: usize,
    pub mav_input_map: f64,
    pub mav_activation_derivative: f64,
    pub mav_weights: f64,
    pub mav_bias_derivative: f64,
    pub mav_loss_weight_derivative: f64,
    pub input_map_bound: Option<f64>,
    pub weight_derivative_bound: Option<f64>,
    /// Output positions sharing each weight. The derivative bound covers a
    /// single position; the actual sum can exceed it by up to this factor.
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub layers: Vec<LayerDiagnostics>,
    pub window: DiagWindow,
    pub loss: Loss,
    pub max_loss_grad: f64,
    pub probe_size: usize,
}

impl DiagnosticReport {
    pub fn flag(&self, layer: &LayerDiagnostics) -> Flag {
        self.window.classify(layer.mav_loss_weight_derivative)
    }

    pub fn flags(&self) -> Vec<Flag> {
        self.layers.iter().map(|l| self.flag(l)).collect()
    }

    pub fn all_within_window(&self) -> bool {
        self.flags().iter().all(|&f| f == Flag::Ok)
    }
}

fn mav<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.as_f64().abs()).sum::<f64>() / values.len() as f64
}

struct SampleProbe<T> {
    back: BackwardOutput<T>,
    // per parameterized layer: MAV of input map and activation derivative
    input_mav: Vec<f64>,
    deriv_mav: Vec<f64>,
    max_loss_grad: f64,
}

fn probe_sample<T: Scalar>(
    net: &Network<T>,
    params: &[usize],
    input: &FeatureMap<T>,
    target: &[T],
) -> Result<SampleProbe<T>, ShapeError> {
    let trace = net.forward(input, Mode::Inference, &mut StepRng::new(0, 0))?;
    let back = backward_detailed(net, &trace, target)?;
    let g = loss_output_gradient(net, &trace, target)?;
    let max_loss_grad = g.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    let mut input_mav = Vec::with_capacity(params.len());
    let mut deriv_mav = Vec::with_capacity(params.len());
    for &i in params {
        let lt = &trace.layers[i];
        input_mav.push(mav(lt.input.values()));
        let act = net.layers()[i].spec.activation().expect("parameterized layer");
        let d: Vec<T> = lt.pre.values().iter().map(|&x| act.eval(x).1).collect();
        deriv_mav.push(mav(&d));
    }
    Ok(SampleProbe {
        back,
        input_mav,
        deriv_mav,
        max_loss_grad,
    })
}

/// Runs the probe batch without touching parameters and assembles the report.
///
/// Bounds are filled in when `amps` is given. For MAE the maximal
/// output-neuron derivative is `1/K`; other losses use the largest value seen
/// on the probe batch.
pub fn diagnose<T: Scalar>(
    net: &Network<T>,
    probe: &[(FeatureMap<T>, Vec<T>)],
    amps: Option<&InitAmplitudes>,
    window: DiagWindow,
) -> Result<DiagnosticReport, ShapeError> {
    let params = net.param_layers();
    let samples = probe
        .iter()
        .map(|(x, t)| probe_sample(net, &params, x, t))
        .collect::<Result<Vec<_>, _>>()?;
    assemble(net, &params, samples, amps, window)
}

/// [`diagnose`] with probe samples spread over a worker pool.
pub fn diagnose_with<T: Scalar>(
    net: &Network<T>,
    probe: &[(FeatureMap<T>, Vec<T>)],
    amps: Option<&InitAmplitudes>,
    window: DiagWindow,
    pool: &WorkerPool,
) -> Result<DiagnosticReport, ShapeError> {
    let params = net.param_layers();
    let samples = pool
        .map_collect(probe.len(), |i| probe_sample(net, &params, &probe[i].0, &probe[i].1))
        .map_err(|e| ShapeError::Geometry(e.to_string()))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    assemble(net, &params, samples, amps, window)
}

fn assemble<T: Scalar>(
    net: &Network<T>,
    params: &[usize],
    samples: Vec<SampleProbe<T>>,
    amps: Option<&InitAmplitudes>,
    window: DiagWindow,
) -> Result<DiagnosticReport, ShapeError> {
    if samples.is_empty() {
        return Err(ShapeError::Length {
            expected: 1,
            actual: 0,
        });
    }
    if let Some(a) = amps {
        if a.len() != params.len() {
            return Err(ShapeError::Length {
                expected: params.len(),
                actual: a.len(),
            });
        }
    }
    let count = samples.len() as f64;
    let grads: Vec<Gradients<T>> = samples.iter().map(|s| s.back.grads.clone()).collect();
    let mean = Gradients::mean(&grads).expect("non-empty probe");
    let max_loss_grad = if net.loss() == Loss::Mae && !net.ends_in_softmax() {
        1.0 / net.output_dims().len() as f64
    } else {
        samples.iter().map(|s| s.max_loss_grad).fold(0.0, f64::max)
    };

    let mut layers = Vec::with_capacity(params.len());
    for (k, &i) in params.iter().enumerate() {
        let layer = &net.layers()[i];
        let bank = layer.bank.as_ref().expect("parameterized layer");
        let mut bias_sum = vec![0.0; layer.output_dims.len()];
        for s in &samples {
            for (acc, v) in bias_sum.iter_mut().zip(&s.back.neuron_sensitivity[i]) {
                *acc += v.as_f64();
            }
        }
        let mav_bias_derivative =
            bias_sum.iter().map(|v| (v / count).abs()).sum::<f64>() / bias_sum.len().max(1) as f64;
        let n = k + 1;
        let entry = LayerDiagnostics {
            param_layer: n,
            network_layer: i + 1,
            mav_input_map: samples.iter().map(|s| s.input_mav[k]).sum::<f64>() / count,
            mav_activation_derivative: samples.iter().map(|s| s.deriv_mav[k]).sum::<f64>() / count,
            mav_weights: mav(&bank.weights),
            mav_bias_derivative,
            mav_loss_weight_derivative: mav(&mean.layers[i].as_ref().expect("grad").weights),
            input_map_bound: amps.map(|a| input_map_bound(a, n)).transpose()?,
            weight_derivative_bound: amps
                .map(|a| weight_derivative_bound(a, n, max_loss_grad))
                .transpose()?,
            multiplicity: layer.output_dims.rows * layer.output_dims.cols,
        };
        let values = [
            entry.mav_input_map,
            entry.mav_activation_derivative,
            entry.mav_weights,
            entry.mav_bias_derivative,
            entry.mav_loss_weight_derivative,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ShapeError::NonFinite(i));
        }
        layers.push(entry);
    }
    Ok(DiagnosticReport {
        layers,
        window,
        loss: net.loss(),
        max_loss_grad,
        probe_size: samples.len(),
    })
}

fn sci(v: f64) -> String {
    format!("{v:.2e}")
}

/// Fixed-width console table, one row per parameterized layer.
pub fn render_report(report: &DiagnosticReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Initialization diagnostics: {} probe samples, loss {}, max |dLoss/dN| {}",
        report.probe_size,
        report.loss,
        sci(report.max_loss_grad)
    );
    let _ = writeln!(
        out,
        "{:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6}  flag",
        "layer", "net", "In*", "N'*", "W*", "dL/db*", "dL/dW***", "bound In", "bound dW", "mult"
    );
    for l in &report.layers {
        let flag = match report.flag(l) {
            Flag::Low => "LOW",
            Flag::Ok => "ok",
            Flag::High => "HIGH",
        };
        let bound = |b: Option<f64>| b.map_or_else(|| "-".to_string(), sci);
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6}  {}",
            l.param_layer,
            l.network_layer,
            sci(l.mav_input_map),
            sci(l.mav_activation_derivative),
            sci(l.mav_weights),
            sci(l.mav_bias_derivative),
            sci(l.mav_loss_weight_derivative),
            bound(l.input_map_bound),
            bound(l.weight_derivative_bound),
            l.multiplicity,
            flag
        );
    }
    let _ = writeln!(
        out,
        "* mean absolute values; *** loss weight derivative MAV, acceptable window [{}, {}]",
        sci(report.window.low),
        sci(report.window.high)
    );
    let _ = writeln!(
        out,
        "bounds are per output position; mult counts the positions sharing each weight"
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::backward;
    use crate::init::{init_weights, Amplitude};
    use crate::net::{build_network, Activation, LayerSpec};
    use crate::tensor::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_layer(act: Activation, loss: Loss) -> Network<f64> {
        build_network(
            &[LayerSpec::conv(3, 3, 3, act), LayerSpec::dense(2, Activation::Identity)],
            loss,
            Dims::new(1, 6, 6),
        )
        .unwrap()
    }

    fn probe(n: usize, dims: Dims, k: usize, seed: u64) -> Vec<(FeatureMap<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = FeatureMap::from_fn(dims, |_, _, _| rng.gen::<f64>());
                let t = (0..k).map(|_| rng.gen::<f64>() + 5.0).collect();
                (x, t)
            })
            .collect()
    }

    fn initialized(act: Activation, loss: Loss, seed: u64) -> (Network<f64>, InitAmplitudes) {
        let mut net = two_layer(act, loss);
        let amps = InitAmplitudes::new(vec![Amplitude::new(0.5, 0.1), Amplitude::new(1.0, 0.1)]).unwrap();
        init_weights(&mut net, &amps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (net, amps)
    }

    #[test]
    fn identity_activation_derivative_is_one() {
        let (net, amps) = initialized(Activation::Identity, Loss::Mse, 1);
        let r = diagnose(&net, &probe(8, net.input_dims(), 2, 2), Some(&amps), DiagWindow::default()).unwrap();
        assert_eq!(r.layers.len(), 2);
        assert!(r.layers.iter().all(|l| l.mav_activation_derivative == 1.0));
    }

    #[test]
    fn diagnose_leaves_parameters_untouched() {
        let (net, amps) = initialized(Activation::Relu, Loss::Mse, 3);
        let before = net.clone();
        diagnose(&net, &probe(4, net.input_dims(), 2, 4), Some(&amps), DiagWindow::default()).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn loss_weight_mav_matches_raw_gradients() {
        let (net, _) = initialized(Activation::Sigmoid, Loss::Mse, 5);
        let batch = probe(6, net.input_dims(), 2, 6);
        let r = diagnose(&net, &batch, None, DiagWindow::default()).unwrap();
        let mut sum = Gradients::zeros_like(&net);
        for (x, t) in &batch {
            let trace = net.forward(x, Mode::Inference, &mut StepRng::new(0, 0)).unwrap();
            sum.add_assign(&backward(&net, &trace, t).unwrap());
        }
        for (k, &i) in net.param_layers().iter().enumerate() {
            let w = &sum.layers[i].as_ref().unwrap().weights;
            let expect = w.iter().map(|v| (v / 6.0).abs()).sum::<f64>() / w.len() as f64;
            assert!((r.layers[k].mav_loss_weight_derivative - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer2_rescale_lifts_layer1_derivatives() {
        // positive inputs and weights keep the MAE sign pattern fixed
        let mut net = two_layer(Activation::Identity, Loss::Mae);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in net.layers_mut() {
            let b = l.bank.as_mut().unwrap();
            b.weights.iter_mut().for_each(|w| *w = rng.gen_range(0.01..0.05));
        }
        let batch = probe(5, net.input_dims(), 2, 10);
        let base = diagnose(&net, &batch, None, DiagWindow::default()).unwrap();
        net.layers_mut()[1].bank.as_mut().unwrap().weights.iter_mut().for_each(|w| *w *= 10.0);
        let scaled = diagnose(&net, &batch, None, DiagWindow::default()).unwrap();
        let ratio = scaled.layers[0].mav_loss_weight_derivative / base.layers[0].mav_loss_weight_derivative;
        assert!((ratio - 10.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn hand_chain_mavs() {
        // 1x1 chain: x=2, w1=3, w2=4, target 0 under MSE
        let mut net = build_network::<f64>(
            &[
                LayerSpec::conv(1, 1, 1, Activation::Identity),
                LayerSpec::conv(1, 1, 1, Activation::Identity),
            ],
            Loss::Mse,
            Dims::new(1, 1, 1),
        )
        .unwrap();
        net.layers_mut()[0].bank.as_mut().unwrap().weights[0] = 3.0;
        net.layers_mut()[1].bank.as_mut().unwrap().weights[0] = 4.0;
        let x = FeatureMap::new(Dims::new(1, 1, 1), vec![2.0]).unwrap();
        let r = diagnose(&net, &[(x, vec![0.0])], None, DiagWindow::default()).unwrap();
        assert_eq!(r.layers[0].mav_loss_weight_derivative, 384.0);
        assert_eq!(r.layers[1].mav_loss_weight_derivative, 288.0);
        assert_eq!(r.layers[0].mav_bias_derivative, 192.0);
        assert_eq!(r.layers[1].mav_bias_derivative, 48.0);
        assert_eq!(r.layers[1].mav_input_map, 6.0);
    }

    #[test]
    fn pooled_diagnose_matches_sequential() {
        let (net, amps) = initialized(Activation::Relu, Loss::Mse, 11);
        let batch = probe(13, net.input_dims(), 2, 12);
        let a = diagnose(&net, &batch, Some(&amps), DiagWindow::default()).unwrap();
        let pool = WorkerPool::new(3);
        let b = diagnose_with(&net, &batch, Some(&amps), DiagWindow::default(), &pool).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_probe_and_bad_dims_rejected() {
        let (net, _) = initialized(Activation::Identity, Loss::Mse, 1);
        assert!(diagnose(&net, &[], None, DiagWindow::default()).is_err());
        let wrong = probe(1, Dims::new(1, 5, 5), 2, 1);
        assert!(matches!(
            diagnose(&net, &wrong, None, DiagWindow::default()),
            Err(ShapeError::Dims { .. })
        ));
    }

    fn report_with(values: &[f64]) -> DiagnosticReport {
        DiagnosticReport {
            layers: values
                .iter()
                .enumerate()
                .map(|(i, &v)| LayerDiagnostics {
                    param_layer: i + 1,
                    network_layer: i + 1,
                    mav_input_map: 0.5,
                    mav_activation_derivative: 1.0,
                    mav_weights: 0.02,
                    mav_bias_derivative: 0.0,
                    mav_loss_weight_derivative: v,
                    input_map_bound: Some(1.0),
                    weight_derivative_bound: None,
                    multiplicity: 1,
                })
                .collect(),
            window: DiagWindow::default(),
            loss: Loss::Mae,
            max_loss_grad: 1.0,
            probe_size: 32,
        }
    }

    #[test]
    fn render_flags_out_of_window() {
        let text = render_report(&report_with(&[1e-4, 0.5]));
        let rows: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).collect();
        assert_eq!(rows.len(), 2);
        assert!(text.contains("***"));
        assert!(rows[0].ends_with("LOW") && rows[0].contains("1.00e-4"));
        assert!(rows[1].ends_with("HIGH") && rows[1].contains("5.00e-1"));
        let ok = render_report(&report_with(&[0.05]));
        assert!(!ok.contains("LOW") && !ok.contains("HIGH"));
        assert!(report_with(&[0.05]).all_within_window());
    }
}

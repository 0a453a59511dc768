//! Dropout, dropconnect and freezeconnect.
//!
//! Dropconnect removes the selected weights from the forward convolution
//! (and therefore from the gradient). Freezeconnect keeps them in the
//! convolution and only withholds them from optimizer updates.

use rand::seq::index;
use rand::Rng;

use crate::error::ShapeError;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, FeatureMap, FilterBank};

/// When a freezeconnect mask is redrawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resample {
    #[default]
    PerRun,
    PerEpoch,
    PerBatch,
}

impl std::str::FromStr for Resample {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_run" => Ok(Resample::PerRun),
            "per_epoch" => Ok(Resample::PerEpoch),
            "per_batch" => Ok(Resample::PerBatch),
            other => Err(format!("unknown resample schedule `{other}`")),
        }
    }
}

impl std::fmt::Display for Resample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Resample::PerRun => "per_run",
            Resample::PerEpoch => "per_epoch",
            Resample::PerBatch => "per_batch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerSpec {
    Dropout { rate: f64 },
    Dropconnect { rate: f64 },
    Freezeconnect { rate: f64, resample: Resample },
}

impl RegularizerSpec {
    pub fn rate(&self) -> f64 {
        match *self {
            RegularizerSpec::Dropout { rate }
            | RegularizerSpec::Dropconnect { rate }
            | RegularizerSpec::Freezeconnect { rate, .. } => rate,
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let rate = self.rate();
        if !(0.0..=1.0).contains(&rate) {
            return Err(ShapeError::Rate(rate));
        }
        if let RegularizerSpec::Dropout { rate } = *self {
            if rate >= 1.0 {
                return Err(ShapeError::Rate(rate));
            }
        }
        Ok(())
    }
}

/// One flag per weight of a layer; `true` means selected by the policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    selected: Vec<bool>,
}

impl WeightMask {
    pub fn none(len: usize) -> Self {
        WeightMask {
            selected: vec![false; len],
        }
    }

    pub fn from_flags(selected: Vec<bool>) -> Self {
        WeightMask { selected }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    #[inline]
    pub fn is_selected(&self, index: usize) -> bool {
        self.selected[index]
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.selected
    }
}

/// Selects exactly `round(rate * count)` weights uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(count: usize, rate: f64, rng: &mut R) -> WeightMask {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let k = ((rate * count as f64).round() as usize).min(count);
    let mut selected = vec![false; count];
    for i in index::sample(rng, count, k) {
        selected[i] = true;
    }
    WeightMask { selected }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-neuron inverted-dropout factors: 0 for dropped neurons, `1/(1-rate)` for survivors.
pub fn dropout_scales<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn apply_dropout<T: Scalar, R: Rng + ?Sized>(
    map: &FeatureMap<T>,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<FeatureMap<T>, ShapeError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ShapeError::Rate(rate));
    }
    if mode == Mode::Inference || rate == 0.0 {
        return Ok(map.clone());
    }
    let scales: Vec<T> = dropout_scales(map.values().len(), rate, rng);
    let values = map.values().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
    Ok(FeatureMap::from_raw(map.dims(), values))
}

fn check_mask<T: Scalar>(bank: &FilterBank<T>, mask: &WeightMask) -> Result<(), ShapeError> {
    if mask.len() != bank.weights.len() {
        return Err(ShapeError::Length {
            expected: bank.weights.len(),
            actual: mask.len(),
        });
    }
    Ok(())
}

/// A bank whose masked weights act as zero in the forward convolution.
#[derive(Debug, Clone, Copy)]
pub struct DropconnectView<'a, T> {
    pub bank: &'a FilterBank<T>,
    pub mask: &'a WeightMask,
}

impl<T: Scalar> DropconnectView<'_, T> {
    pub fn effective_weight(&self, index: usize) -> T {
        if self.mask.is_selected(index) {
            T::zero()
        } else {
            self.bank.weights[index]
        }
    }

    pub fn convolve(
        &self,
        input: &FeatureMap<T>,
        geom: &ConvGeometry,
    ) -> Result<FeatureMap<T>, ShapeError> {
        crate::tensor::convolve_masked(input, self.bank, Some(self.mask), geom)
    }
}

pub fn apply_dropconnect<'a, T: Scalar>(
    bank: &'a FilterBank<T>,
    mask: &'a WeightMask,
) -> Result<DropconnectView<'a, T>, ShapeError> {
    check_mask(bank, mask)?;
    Ok(DropconnectView { bank, mask })
}

/// Freezeconnect annotation: the bank's forward behaviour is untouched,
/// only optimizer updates of the selected weights are suppressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenWeights {
    pub mask: WeightMask,
}

pub fn apply_freezeconnect<T: Scalar>(
    bank: &FilterBank<T>,
    mask: &WeightMask,
) -> Result<FrozenWeights, ShapeError> {
    check_mask(bank, mask)?;
    Ok(FrozenWeights { mask: mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{convolve, BankDims, Dims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_counts_are_exact() {
        assert_eq!(sample_mask(50, 0.0, &mut rng(1)).selected_count(), 0);
        assert_eq!(sample_mask(50, 1.0, &mut rng(1)).selected_count(), 50);
        assert_eq!(sample_mask(100, 0.1, &mut rng(1)).selected_count(), 10);
        for n in 0..60 {
            for rate in [0.05, 0.25, 0.33, 0.5, 0.9] {
                let m = sample_mask(n, rate, &mut rng(n as u64));
                assert_eq!(m.selected_count(), (rate * n as f64).round() as usize);
            }
        }
    }

    #[test]
    fn mask_is_deterministic_per_seed() {
        assert_eq!(sample_mask(200, 0.3, &mut rng(9)), sample_mask(200, 0.3, &mut rng(9)));
        assert_ne!(sample_mask(200, 0.3, &mut rng(9)), sample_mask(200, 0.3, &mut rng(10)));
    }

    fn test_map(n: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(Dims::new(1, 1, n), |_, _, c| 0.5 + (c % 7) as f64 * 0.1)
    }

    #[test]
    fn dropout_identity_cases() {
        let m = test_map(30);
        assert_eq!(apply_dropout(&m, 0.0, &mut rng(0), Mode::Train).unwrap(), m);
        assert_eq!(apply_dropout(&m, 0.7, &mut rng(0), Mode::Inference).unwrap(), m);
        assert!(apply_dropout(&m, 1.0, &mut rng(0), Mode::Train).is_err());
    }

    #[test]
    fn dropout_survivors_scaled() {
        let m = FeatureMap::from_fn(Dims::new(1, 1, 1000), |_, _, _| 1.0);
        let out = apply_dropout(&m, 0.5, &mut rng(4), Mode::Train).unwrap();
        let survivors = out.values().iter().filter(|&&v| v != 0.0).count() as f64;
        assert!(out.values().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((survivors - 500.0).abs() <= 3.0 * 250f64.sqrt());
    }

    #[test]
    fn dropout_preserves_mean_statistically() {
        let m = test_map(8);
        let trials = 10_000;
        let mut r = rng(77);
        let mut sums = [0.0; 8];
        for _ in 0..trials {
            let out = apply_dropout(&m, 0.3, &mut r, Mode::Train).unwrap();
            for (s, v) in sums.iter_mut().zip(out.values()) {
                *s += v;
            }
        }
        for (s, &x) in sums.iter().zip(m.values()) {
            let mean = s / trials as f64;
            // per-trial std of x*B/(1-p) is x*sqrt(p/(1-p))
            let sigma = x * (0.3f64 / 0.7).sqrt() / (trials as f64).sqrt();
            assert!((mean - x).abs() <= 3.0 * sigma, "mean {mean} vs {x}");
        }
    }

    fn test_bank() -> FilterBank<f64> {
        let dims = BankDims { out_channels: 2, in_channels: 1, v: 2, h: 2 };
        FilterBank::new(dims, vec![0.5, -1.0, 2.0, 0.25, 1.5, 0.75, -0.5, 1.0], vec![0.0, 0.0], true).unwrap()
    }

    #[test]
    fn dropconnect_examples() {
        let bank = test_bank();
        let x = FeatureMap::from_fn(Dims::new(1, 3, 3), |_, r, c| (r * 3 + c) as f64 + 1.0);
        let g = ConvGeometry::default();
        let plain = convolve(&x, &bank, &g).unwrap();
        let empty = WeightMask::none(8);
        assert_eq!(apply_dropconnect(&bank, &empty).unwrap().convolve(&x, &g).unwrap(), plain);

        let full = WeightMask::from_flags(vec![true; 8]);
        let out = apply_dropconnect(&bank, &full).unwrap().convolve(&x, &g).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));

        let half = sample_mask(8, 0.5, &mut rng(3));
        let view = apply_dropconnect(&bank, &half).unwrap();
        let mut zeroed = bank.clone();
        for (i, w) in zeroed.weights.iter_mut().enumerate() {
            if half.is_selected(i) {
                *w = 0.0;
            }
            assert_eq!(view.effective_weight(i), *w);
        }
        let oracle = convolve(&x, &zeroed, &g).unwrap();
        for (a, b) in view.convolve(&x, &g).unwrap().values().iter().zip(oracle.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn mask_dims_checked() {
        let bank = test_bank();
        assert!(apply_dropconnect(&bank, &WeightMask::none(3)).is_err());
        assert!(apply_freezeconnect(&bank, &WeightMask::none(9)).is_err());
        assert!(apply_freezeconnect(&bank, &WeightMask::none(8)).is_ok());
    }

    #[test]
    fn rate_validation() {
        assert!(RegularizerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(RegularizerSpec::Dropconnect { rate: 1.0 }.validate().is_ok());
        assert!(RegularizerSpec::Freezeconnect { rate: 1.2, resample: Resample::PerRun }.validate().is_err());
        assert!("per_batch".parse::<Resample>().is_ok());
        assert!("sometimes".parse::<Resample>().is_err());
    }
}

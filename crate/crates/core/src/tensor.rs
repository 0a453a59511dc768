//! Feature maps, filter banks and the forward convolution and pooling kernels.
//!
//! Convolution here is cross-correlation (filters are not flipped), as in
//! practically every CNN implementation. Values are stored row-major with
//! the channel as the slowest axis, and every kernel enumerates output
//! elements in that same order so serial and pooled execution agree bit
//! for bit.

use crate::error::ShapeError;
use crate::parallel::{StageError, WorkerPool};
use crate::regularize::WeightMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub const fn new(channels: usize, rows: usize, cols: usize) -> Self {
        Dims {
            channels,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.rows + row) * self.cols + col
    }

    /// Inverse of [`Dims::index`].
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.cols;
        let row = (index / self.cols) % self.rows;
        (index / (self.rows * self.cols), row, col)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.rows, self.cols)
    }
}

/// A channels x rows x cols grid of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    dims: Dims,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Builds a map after checking the length and that every value is finite.
    pub fn new(dims: Dims, values: Vec<T>) -> Result<Self, ShapeError> {
        if values.len() != dims.len() {
            return Err(ShapeError::Length {
                expected: dims.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ShapeError::NonFinite(i));
        }
        Ok(FeatureMap { dims, values })
    }

    /// Builds a map without the finiteness scan. Length is still asserted.
    pub(crate) fn from_raw(dims: Dims, values: Vec<T>) -> Self {
        assert_eq!(values.len(), dims.len());
        FeatureMap { dims, values }
    }

    pub fn zeros(dims: Dims) -> Self {
        FeatureMap {
            dims,
            values: vec![T::zero(); dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for r in 0..dims.rows {
                for col in 0..dims.cols {
                    values.push(f(c, r, col));
                }
            }
        }
        FeatureMap { dims, values }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> T {
        self.values[self.dims.index(channel, row, col)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            dims: self.dims,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            dims: self.dims,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_value(&self) -> T {
        self.values
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }
}

/// Shape of a filter bank: out x in x v x h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BankDims {
    pub out_channels: usize,
    pub in_channels: usize,
    pub v: usize,
    pub h: usize,
}

impl BankDims {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.v * self.h
    }

    #[inline]
    pub fn index(&self, out: usize, inp: usize, row: usize, col: usize) -> usize {
        ((out * self.in_channels + inp) * self.v + row) * self.h + col
    }
}

/// Weights and biases of one convolutional (or dense) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    dims: BankDims,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
    /// When false no optimizer step may touch `biases`.
    pub bias_learning: bool,
}

impl<T: Scalar> FilterBank<T> {
    pub fn zeros(dims: BankDims, bias_learning: bool) -> Self {
        FilterBank {
            dims,
            weights: vec![T::zero(); dims.weight_count()],
            biases: vec![T::zero(); dims.out_channels],
            bias_learning,
        }
    }

    pub fn new(
        dims: BankDims,
        weights: Vec<T>,
        biases: Vec<T>,
        bias_learning: bool,
    ) -> Result<Self, ShapeError> {
        if weights.len() != dims.weight_count() {
            return Err(ShapeError::Length {
                expected: dims.weight_count(),
                actual: weights.len(),
            });
        }
        if biases.len() != dims.out_channels {
            return Err(ShapeError::Length {
                expected: dims.out_channels,
                actual: biases.len(),
            });
        }
        if let Some(i) = weights.iter().chain(&biases).position(|v| !v.is_finite()) {
            return Err(ShapeError::NonFinite(i));
        }
        Ok(FilterBank {
            dims,
            weights,
            biases,
            bias_learning,
        })
    }

    pub fn dims(&self) -> BankDims {
        self.dims
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize, row: usize, col: usize) -> T {
        self.weights[self.dims.index(out, inp, row, col)]
    }
}

/// Strides and padding of a convolution.
///
/// `input_pad` is a symmetric zero extension applied before `zero_pad`;
/// both add zeros, so the effective padding per axis is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride_v: usize,
    pub stride_h: usize,
    pub zero_pad_v: usize,
    pub zero_pad_h: usize,
    pub input_pad: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride_v: 1,
            stride_h: 1,
            zero_pad_v: 0,
            zero_pad_h: 0,
            input_pad: 0,
        }
    }
}

impl ConvGeometry {
    pub fn strided(stride_v: usize, stride_h: usize) -> Self {
        ConvGeometry {
            stride_v,
            stride_h,
            ..Default::default()
        }
    }

    pub fn pad_v(&self) -> usize {
        self.zero_pad_v + self.input_pad
    }

    pub fn pad_h(&self) -> usize {
        self.zero_pad_h + self.input_pad
    }
}

fn window_count(extent: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || window == 0 || padded < window {
        None
    } else {
        Some((padded - window) / stride + 1)
    }
}

/// Output dimensions of convolving `input` with a bank of shape `bank`.
pub fn output_shape(input: Dims, bank: BankDims, geom: ConvGeometry) -> Result<Dims, ShapeError> {
    if bank.in_channels != input.channels {
        return Err(ShapeError::Geometry(format!(
            "bank expects {} input channels, map has {}",
            bank.in_channels, input.channels
        )));
    }
    if geom.stride_v == 0 || geom.stride_h == 0 {
        return Err(ShapeError::Geometry("strides must be at least 1".into()));
    }
    let rows = window_count(input.rows, geom.pad_v(), bank.v, geom.stride_v);
    let cols = window_count(input.cols, geom.pad_h(), bank.h, geom.stride_h);
    match (rows, cols) {
        (Some(rows), Some(cols)) if bank.out_channels > 0 => {
            Ok(Dims::new(bank.out_channels, rows, cols))
        }
        _ => Err(ShapeError::Geometry(format!(
            "{}x{} filter with stride {}x{} and padding {}x{} does not fit a {} map",
            bank.v,
            bank.h,
            geom.stride_v,
            geom.stride_h,
            geom.pad_v(),
            geom.pad_h(),
            input
        ))),
    }
}

/// Output dimensions of max pooling.
pub fn pool_shape(
    input: Dims,
    window_v: usize,
    window_h: usize,
    stride_v: usize,
    stride_h: usize,
) -> Result<Dims, ShapeError> {
    let rows = window_count(input.rows, 0, window_v, stride_v);
    let cols = window_count(input.cols, 0, window_h, stride_h);
    match (rows, cols) {
        (Some(rows), Some(cols)) => Ok(Dims::new(input.channels, rows, cols)),
        _ => Err(ShapeError::Geometry(format!(
            "{window_v}x{window_h} pool window with stride {stride_v}x{stride_h} does not fit a {input} map"
        ))),
    }
}

/// Pre-activation value of one output element. Masked weights are skipped.
#[inline]
fn conv_element<T: Scalar>(
    input: &FeatureMap<T>,
    bank: &FilterBank<T>,
    mask: Option<&WeightMask>,
    geom: &ConvGeometry,
    out: usize,
    row: usize,
    col: usize,
) -> T {
    let d = input.dims;
    let bd = bank.dims;
    let pad_v = geom.pad_v() as isize;
    let pad_h = geom.pad_h() as isize;
    let top = (row * geom.stride_v) as isize - pad_v;
    let left = (col * geom.stride_h) as isize - pad_h;
    let mut acc = T::zero();
    for inp in 0..bd.in_channels {
        for kr in 0..bd.v {
            let y = top + kr as isize;
            if y < 0 || y >= d.rows as isize {
                continue;
            }
            let in_base = d.index(inp, y as usize, 0);
            let w_base = bd.index(out, inp, kr, 0);
            for kc in 0..bd.h {
                let x = left + kc as isize;
                if x < 0 || x >= d.cols as isize {
                    continue;
                }
                let wi = w_base + kc;
                if mask.is_some_and(|m| m.is_selected(wi)) {
                    continue;
                }
                acc += bank.weights[wi] * input.values[in_base + x as usize];
            }
        }
    }
    acc + bank.biases[out]
}

pub(crate) fn convolve_masked<T: Scalar>(
    input: &FeatureMap<T>,
    bank: &FilterBank<T>,
    mask: Option<&WeightMask>,
    geom: &ConvGeometry,
) -> Result<FeatureMap<T>, ShapeError> {
    let out_dims = output_shape(input.dims, bank.dims, *geom)?;
    let mut values = Vec::with_capacity(out_dims.len());
    for o in 0..out_dims.channels {
        for r in 0..out_dims.rows {
            for c in 0..out_dims.cols {
                values.push(conv_element(input, bank, mask, geom, o, r, c));
            }
        }
    }
    Ok(FeatureMap::from_raw(out_dims, values))
}

/// Sum-of-products convolution plus the out-channel bias (no activation).
pub fn convolve<T: Scalar>(
    input: &FeatureMap<T>,
    bank: &FilterBank<T>,
    geom: &ConvGeometry,
) -> Result<FeatureMap<T>, ShapeError> {
    convolve_masked(input, bank, None, geom)
}

#[derive(Debug, thiserror::Error)]
pub enum ParallelConvError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

/// [`convolve`] with the output elements spread over a worker pool.
///
/// Each output element is one independent item, so the result is
/// bit-identical to the serial kernel for every worker count.
pub fn convolve_with<T: Scalar>(
    input: &FeatureMap<T>,
    bank: &FilterBank<T>,
    geom: &ConvGeometry,
    pool: &WorkerPool,
) -> Result<FeatureMap<T>, ParallelConvError> {
    let out_dims = output_shape(input.dims, bank.dims, *geom)?;
    let values = pool.map_collect(out_dims.len(), |k| {
        let (o, r, c) = out_dims.position(k);
        conv_element(input, bank, None, geom, o, r, c)
    })?;
    Ok(FeatureMap::from_raw(out_dims, values))
}

/// Flat input index of the maximum that produced each pooled element.
pub type PoolProvenance = Vec<usize>;

/// Max pooling per channel. Ties go to the first element in row-major order.
pub fn max_pool<T: Scalar>(
    input: &FeatureMap<T>,
    window_v: usize,
    window_h: usize,
    stride_v: usize,
    stride_h: usize,
) -> Result<(FeatureMap<T>, PoolProvenance), ShapeError> {
    let d = input.dims;
    let out_dims = pool_shape(d, window_v, window_h, stride_v, stride_h)?;
    let mut values = Vec::with_capacity(out_dims.len());
    let mut provenance = Vec::with_capacity(out_dims.len());
    for ch in 0..out_dims.channels {
        for r in 0..out_dims.rows {
            for c in 0..out_dims.cols {
                let mut best_idx = d.index(ch, r * stride_v, c * stride_h);
                let mut best = input.values[best_idx];
                for wr in 0..window_v {
                    for wc in 0..window_h {
                        let idx = d.index(ch, r * stride_v + wr, c * stride_h + wc);
                        if input.values[idx] > best {
                            best = input.values[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                provenance.push(best_idx);
            }
        }
    }
    Ok((FeatureMap::from_raw(out_dims, values), provenance))
}

/// Gradients of one convolution given the sensitivities of its pre-activations.
pub(crate) struct ConvBackward<T> {
    pub weights: Vec<T>,
    pub biases: Vec<T>,
    pub input: Vec<T>,
}

/// Backward pass of [`convolve_masked`]. Masked weights get exactly zero
/// gradient and pass nothing back to the input.
pub(crate) fn convolve_backward<T: Scalar>(
    input: &FeatureMap<T>,
    bank: &FilterBank<T>,
    mask: Option<&WeightMask>,
    geom: &ConvGeometry,
    grad_pre: &[T],
    want_input: bool,
) -> ConvBackward<T> {
    let d = input.dims;
    let bd = bank.dims;
    let out_dims = output_shape(d, bd, *geom).expect("shape validated at forward time");
    debug_assert_eq!(grad_pre.len(), out_dims.len());
    let mut gw = vec![T::zero(); bd.weight_count()];
    let mut gb = vec![T::zero(); bd.out_channels];
    let mut gi = if want_input {
        vec![T::zero(); d.len()]
    } else {
        Vec::new()
    };
    let pad_v = geom.pad_v() as isize;
    let pad_h = geom.pad_h() as isize;
    for o in 0..out_dims.channels {
        for r in 0..out_dims.rows {
            let top = (r * geom.stride_v) as isize - pad_v;
            for c in 0..out_dims.cols {
                let delta = grad_pre[out_dims.index(o, r, c)];
                gb[o] += delta;
                if delta == T::zero() {
                    continue;
                }
                let left = (c * geom.stride_h) as isize - pad_h;
                for inp in 0..bd.in_channels {
                    for kr in 0..bd.v {
                        let y = top + kr as isize;
                        if y < 0 || y >= d.rows as isize {
                            continue;
                        }
                        let in_base = d.index(inp, y as usize, 0);
                        let w_base = bd.index(o, inp, kr, 0);
                        for kc in 0..bd.h {
                            let x = left + kc as isize;
                            if x < 0 || x >= d.cols as isize {
                                continue;
                            }
                            let wi = w_base + kc;
                            if mask.is_some_and(|m| m.is_selected(wi)) {
                                continue;
                            }
                            let ii = in_base + x as usize;
                            gw[wi] += input.values[ii] * delta;
                            if want_input {
                                gi[ii] += bank.weights[wi] * delta;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvBackward {
        weights: gw,
        biases: gb,
        input: gi,
    }
}

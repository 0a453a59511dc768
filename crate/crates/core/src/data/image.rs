//! Image contraction and augmentation (rotation, stretch, noise).

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::ShapeError;
use crate::tensor::{Dims, FeatureMap};

use super::Sample;

pub const DEFAULT_ROWS: usize = 36;
pub const DEFAULT_COLS: usize = 58;

// (source index, weight) lists for each target coordinate along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|a| {
                    let overlap = hi.min((a + 1) as f64) - lo.max(a as f64);
                    (overlap > 0.0).then(|| (a, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize of every channel to `rows x cols`.
pub fn contract_image(img: &FeatureMap<f64>, rows: usize, cols: usize) -> Result<FeatureMap<f64>, ShapeError> {
    if rows == 0 || cols == 0 {
        return Err(ShapeError::Geometry(format!("target size {rows}x{cols} is empty")));
    }
    let d = img.dims();
    if d.rows == rows && d.cols == cols {
        return Ok(img.clone());
    }
    let wr = axis_weights(d.rows, rows);
    let wc = axis_weights(d.cols, cols);
    let out = Dims::new(d.channels, rows, cols);
    Ok(FeatureMap::from_fn(out, |ch, r, c| {
        let mut acc = 0.0;
        for &(a, wa) in &wr[r] {
            let mut row = 0.0;
            for &(b, wb) in &wc[c] {
                row += wb * img.get(ch, a, b);
            }
            acc += wa * row;
        }
        acc
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub rotation_max_deg: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub noise_level: f64,
    pub noise_fraction: f64,
    /// Output samples per input, the original included.
    pub multiplier: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_deg: 0.0,
            stretch_min: 1.0,
            stretch_max: 1.0,
            noise_level: 0.0,
            noise_fraction: 0.0,
            multiplier: 1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        let bad = |what: &str| Err(ShapeError::Geometry(format!("augmentation: {what}")));
        if self.multiplier == 0 {
            return bad("multiplier must be at least 1");
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return bad("rotation must be a finite non-negative angle");
        }
        if !(self.stretch_min > 0.0 && self.stretch_min <= self.stretch_max && self.stretch_max.is_finite()) {
            return bad("stretch factors must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad("noise level and fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn bilinear(img: &FeatureMap<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let d = img.dims();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= d.rows as f64 || c >= d.cols as f64 {
            0.0
        } else {
            img.get(ch, r as usize, c as usize)
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Rotates by `angle_deg` about the center, then scales rows by `sy` and
/// columns by `sx`, sampling the source by inverse mapping.
pub fn warp(img: &FeatureMap<f64>, angle_deg: f64, sy: f64, sx: f64) -> FeatureMap<f64> {
    if angle_deg == 0.0 && sy == 1.0 && sx == 1.0 {
        return img.clone();
    }
    let d = img.dims();
    let cy = (d.rows as f64 - 1.0) / 2.0;
    let cx = (d.cols as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    FeatureMap::from_fn(d, |ch, r, c| {
        let dy = (r as f64 - cy) / sy;
        let dx = (c as f64 - cx) / sx;
        let y = cos * dy - sin * dx + cy;
        let x = sin * dy + cos * dx + cx;
        bilinear(img, ch, y, x).clamp(0.0, 1.0)
    })
}

/// Adds uniform `±level` noise to exactly `round(fraction * len)` distinct
/// pixels, clamping to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(img: &mut FeatureMap<f64>, level: f64, fraction: f64, rng: &mut R) {
    let len = img.values().len();
    let count = ((fraction * len as f64).round() as usize).min(len);
    if count == 0 || level == 0.0 {
        return;
    }
    let chosen = sample_indices(rng, len, count);
    let values = img.values_mut();
    for i in chosen.iter() {
        values[i] = (values[i] + rng.gen_range(-level..=level)).clamp(0.0, 1.0);
    }
}

/// The original followed by `multiplier - 1` transformed copies.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Vec<Sample> {
    let mut out = Vec::with_capacity(cfg.multiplier.max(1));
    out.push(sample.clone());
    for _ in 1..cfg.multiplier {
        let angle = draw(-cfg.rotation_max_deg, cfg.rotation_max_deg, rng);
        let sy = draw(cfg.stretch_min, cfg.stretch_max, rng);
        let sx = draw(cfg.stretch_min, cfg.stretch_max, rng);
        let mut image = warp(&sample.image, angle, sy, sx);
        add_noise(&mut image, cfg.noise_level, cfg.noise_fraction, rng);
        out.push(Sample {
            image,
            label: sample.label.clone(),
        });
    }
    out
}

//! Synthetic stand-in for the drawing corpus.
//!
//! Class `k` of `K` is a jittered straight stroke through the outer part of
//! the frame at orientation `pi k / K`; the class becomes the age-category
//! token. The subject's age is written into the image as the intensity of a
//! filled central disc (`age_months / 160`), so age can be regressed from
//! the pixels while staying independent of the class. Author code and drawn
//! gender are random.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ShapeError;
use crate::tensor::{Dims, FeatureMap};

use super::label::{CodeTable, Gender, LabelRecord};
use super::Sample;

pub const AGE_SCALE_MONTHS: f64 = 160.0;
pub const MIN_AGE_MONTHS: u32 = 36;
pub const MAX_AGE_MONTHS: u32 = 143;

const CATEGORY_TOKENS: [&str; 8] = ["nu", "p1", "p2", "p3", "p4", "p5", "p6", "p7"];

pub fn category_token(class: usize) -> String {
    CATEGORY_TOKENS
        .get(class)
        .map_or_else(|| format!("c{class}"), |s| (*s).to_string())
}

fn render(rows: usize, cols: usize, class: usize, classes: usize, age: u32, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let disc = 0.2 * rows.min(cols) as f64;
    let clear = disc + 1.5;
    let spread = PI / classes as f64;
    let theta = spread * class as f64 + rng.gen_range(-spread / 6.0..=spread / 6.0);
    let shift = rng.gen_range(-0.75..=0.75);
    let stroke = rng.gen_range(0.7..=1.0);
    let level = f64::from(age) / AGE_SCALE_MONTHS;
    let (sin, cos) = theta.sin_cos();
    FeatureMap::from_fn(Dims::new(1, rows, cols), |_, r, c| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let radius = dy.hypot(dx);
        if radius <= disc {
            return level;
        }
        if radius < clear {
            return 0.0;
        }
        let across = (dx * sin - dy * cos - shift).abs();
        stroke * (1.0 - across / 1.25).max(0.0)
    })
}

/// `class_count * per_class` samples, grouped by class, deterministic per seed.
pub fn synth_dataset(
    class_count: usize,
    per_class: usize,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Vec<Sample>, ShapeError> {
    if class_count < 2 {
        return Err(ShapeError::Geometry("at least two classes are needed".into()));
    }
    if rows < 8 || cols < 8 {
        return Err(ShapeError::Geometry(format!("synthetic images need at least 8x8, got {rows}x{cols}")));
    }
    let codes = CodeTable::default();
    let letters: Vec<char> = codes.codes().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        for _ in 0..per_class {
            let age = rng.gen_range(MIN_AGE_MONTHS..=MAX_AGE_MONTHS);
            let author_code = letters[rng.gen_range(0..letters.len())];
            let drawn_gender = if rng.gen::<bool>() { Gender::Female } else { Gender::Male };
            let image = render(rows, cols, class, class_count, age, &mut rng);
            let label = LabelRecord {
                age_category: category_token(class),
                subject_id: out.len() as u32 + 1,
                author_code,
                age_months: age,
                drawn_gender,
                author: codes.get(author_code).expect("letter from the table"),
            };
            out.push(Sample { image, label });
        }
    }
    Ok(out)
}

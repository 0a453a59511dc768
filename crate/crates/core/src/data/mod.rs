//! Dataset ingestion: filename labels, PGM images, contraction,
//! augmentation, one-hot encoding and a synthetic corpus.

pub mod encode;
pub mod image;
pub mod label;
pub mod pgm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::ShapeError;
use crate::tensor::FeatureMap;

pub use encode::{encode_onehot, CategoryTable, EncodeError, EncoderSpec, FactorGroup};
pub use image::{augment, contract_image, AugmentConfig};
pub use label::{parse_filename, regression_target, render_filename, CodeTable, LabelError, LabelRecord};
pub use synth::synth_dataset;

/// A single-channel image with values in `[0, 1]` and its decoded label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FeatureMap<f64>,
    pub label: LabelRecord,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Pgm {
        path: PathBuf,
        source: pgm::PgmError,
    },
    #[error("no .pgm files in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every `.pgm` file of `dir` in filename order, contracting images to
/// `size` when given.
pub fn load_dir(dir: &Path, codes: &CodeTable, size: Option<(usize, usize)>) -> Result<Vec<Sample>, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    if paths.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let label = parse_filename(name, codes)?;
            let bytes = fs::read(p).map_err(io_err(p))?;
            let mut image = pgm::read_pgm(&bytes).map_err(|source| DataError::Pgm {
                path: p.clone(),
                source,
            })?;
            if let Some((rows, cols)) = size {
                image = contract_image(&image, rows, cols)?;
            }
            Ok(Sample { image, label })
        })
        .collect()
}

/// Writes each sample as `<rendered label>.pgm`, creating `dir` if needed.
pub fn save_dir(dir: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    samples
        .iter()
        .map(|s| {
            let path = dir.join(render_filename(&s.label, "pgm"));
            fs::write(&path, pgm::write_pgm(&s.image)).map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}

//! Binary model file.
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`.
//!
//! ```text
//! "IGN1"
//! u32 len, config text (resolved layers, parses with `Config::parse`)
//! u32 len, category table text
//! u32 channels, u32 rows, u32 cols         input dims
//! u32 P                                    parameterized layers
//! P times: u32 nw, u32 nb, nw f64 weights, nb f64 biases
//! P times: u8 has_mask, then if 1: u32 n, n bytes of 0/1
//! ```
//!
//! Anything after the last mask is an error, as is any short read.

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::data::{CategoryTable, EncodeError};
use crate::error::ShapeError;
use crate::net::{build_network, Network};
use crate::regularize::WeightMask;
use crate::tensor::Dims;

pub const MAGIC: &[u8; 4] = b"IGN1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not a model file (bad magic bytes)")]
    Magic,
    #[error("model file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the model data")]
    Trailing(usize),
    #[error("model text is not UTF-8")]
    Utf8,
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("embedded category table: {0}")]
    Table(#[from] EncodeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("model data does not match its architecture: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// Config whose `layers` are fully resolved (no `units = auto`).
    pub config: Config,
    pub table: CategoryTable,
    pub network: Network<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("count fits in u32").to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_text(&mut out, &model.config.render());
    put_text(&mut out, &model.table.to_text());
    let d = model.network.input_dims();
    for n in [d.channels, d.rows, d.cols] {
        put_u32(&mut out, n);
    }
    let banks: Vec<_> = model.network.layers().iter().filter_map(|l| l.bank.as_ref().map(|b| (b, &l.frozen))).collect();
    put_u32(&mut out, banks.len());
    for (b, _) in &banks {
        put_u32(&mut out, b.weights.len());
        put_u32(&mut out, b.biases.len());
        for x in b.weights.iter().chain(&b.biases) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for (_, mask) in &banks {
        match mask {
            Some(m) => {
                out.push(1);
                put_u32(&mut out, m.len());
                out.extend(m.flags().iter().map(|&f| u8::from(f)));
            }
            None => out.push(0),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() < n {
            return Err(ModelError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &'static str) -> Result<&'a str, ModelError> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| ModelError::Utf8)
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, ModelError> {
        let len = n.checked_mul(8).ok_or(ModelError::Truncated(what))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { bytes };
    if r.take(4, "magic").map_err(|_| ModelError::Magic)? != MAGIC {
        return Err(ModelError::Magic);
    }
    let config = Config::parse(r.text("config")?)?;
    let table = CategoryTable::from_text(r.text("category table")?)?;
    let dims = Dims::new(r.u32("input dims")?, r.u32("input dims")?, r.u32("input dims")?);
    let mut network = build_network::<f64>(&config.layers, config.loss(), dims)?;
    let count = r.u32("layer count")?;
    let params = network.param_layers();
    if count != params.len() {
        return Err(ModelError::Mismatch(format!("{count} parameter blocks for {} layers", params.len())));
    }
    for &i in &params {
        let bank = network.layers_mut()[i].bank.as_mut().expect("parameterized layer");
        let (nw, nb) = (r.u32("weight count")?, r.u32("bias count")?);
        if nw != bank.weights.len() || nb != bank.biases.len() {
            return Err(ModelError::Mismatch(format!(
                "layer {}: {nw} weights and {nb} biases, expected {} and {}",
                i + 1,
                bank.weights.len(),
                bank.biases.len()
            )));
        }
        bank.weights = r.f64s(nw, "weights")?;
        bank.biases = r.f64s(nb, "biases")?;
    }
    for &i in &params {
        let layer = &mut network.layers_mut()[i];
        match r.take(1, "mask flag")?[0] {
            0 => layer.frozen = None,
            1 => {
                let n = r.u32("mask length")?;
                let expected = layer.bank.as_ref().map_or(0, |b| b.weights.len());
                if n != expected {
                    return Err(ModelError::Mismatch(format!("layer {}: mask of {n} for {expected} weights", i + 1)));
                }
                let flags = r
                    .take(n, "mask")?
                    .iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(ModelError::Mismatch(format!("mask byte {other}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                layer.frozen = Some(WeightMask::from_flags(flags));
            }
            other => return Err(ModelError::Mismatch(format!("mask flag {other}"))),
        }
    }
    if !r.bytes.is_empty() {
        return Err(ModelError::Trailing(r.bytes.len()));
    }
    Ok(Model { config, table, network })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, EncoderSpec, FactorGroup};
    use crate::init::{init_weights, InitAmplitudes};
    use crate::net::PresetOptions;
    use crate::config::Preset;
    use crate::train::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let opts = PresetOptions {
            freezeconnect: Some((0.3, crate::regularize::Resample::PerRun)),
            ..PresetOptions::default()
        };
        let mut config = Config::from_preset(Preset::Deep, &opts, Task::Classify);
        config.rows = 16;
        config.cols = 20;
        let samples = synth_dataset(3, 2, 16, 20, 1).unwrap();
        let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
        let table = CategoryTable::from_records(&labels, &EncoderSpec::new(&[FactorGroup::AgeCategory]).unwrap()).unwrap();
        config.layers = config.resolved_layers(table.len());
        let mut network = build_network(&config.layers, config.loss(), Dims::new(1, 16, 20)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let amps = InitAmplitudes::uniform(network.param_layers().len(), 1.0, 0.1);
        init_weights(&mut network, &amps, &mut rng).unwrap();
        network.sample_freeze_masks(None, &mut rng);
        Model { config, table, network }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"IGN1");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
        assert!(back.network.layers().iter().any(|l| l.frozen.is_some()));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode_model(&model());
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(decode_model(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(ModelError::Trailing(1))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(ModelError::Magic)));
    }
}

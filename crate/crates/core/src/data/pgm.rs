//! 8-bit portable graymap (P2 ASCII and P5 binary) reading and writing.

use thiserror::Error;

use crate::tensor::{Dims, FeatureMap};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PgmError {
    #[error("not a PGM file (expected P2 or P5)")]
    Magic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (1..=255)")]
    MaxVal(u32),
    #[error("pixel data: {0}")]
    Data(String),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected {what} at byte {start}"))
    }
}

/// Decodes a PGM into a single-channel map with values `p / maxval`.
pub fn read_pgm(bytes: &[u8]) -> Result<FeatureMap<f64>, PgmError> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(PgmError::Magic),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let cols = c.number("width").map_err(PgmError::Header)? as usize;
    let rows = c.number("height").map_err(PgmError::Header)? as usize;
    let maxval = c.number("maxval").map_err(PgmError::Header)?;
    if rows == 0 || cols == 0 {
        return Err(PgmError::Header(format!("empty image {cols}x{rows}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(PgmError::MaxVal(maxval));
    }
    let n = rows * cols;
    let scale = f64::from(maxval);
    let raw: Vec<u32> = if binary {
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(PgmError::Header("missing separator after maxval".into()));
        }
        let data = &bytes[c.pos + 1..];
        if data.len() < n {
            return Err(PgmError::Data(format!("expected {n} bytes, found {}", data.len())));
        }
        data[..n].iter().map(|&b| u32::from(b)).collect()
    } else {
        (0..n)
            .map(|i| c.number(&format!("pixel {i}")))
            .collect::<Result<_, _>>()
            .map_err(PgmError::Data)?
    };
    if let Some(p) = raw.iter().find(|&&p| p > maxval) {
        return Err(PgmError::Data(format!("value {p} exceeds maxval {maxval}")));
    }
    let values = raw.into_iter().map(|p| f64::from(p) / scale).collect();
    FeatureMap::new(Dims::new(1, rows, cols), values).map_err(|e| PgmError::Data(e.to_string()))
}

/// Encodes the first channel as binary P5 with maxval 255, clamping to `[0, 1]`.
pub fn write_pgm(image: &FeatureMap<f64>) -> Vec<u8> {
    let d = image.dims();
    let mut out = format!("P5\n{} {}\n255\n", d.cols, d.rows).into_bytes();
    out.extend(
        image.values()[..d.rows * d.cols]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_comments() {
        let src = b"P2\n# made by hand\n3 2\n# max\n255\n0 255 51\n102 # mid\n 153 204\n";
        let m = read_pgm(src).unwrap();
        assert_eq!(m.dims(), Dims::new(1, 2, 3));
        assert_eq!(m.values(), &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
    }

    #[test]
    fn binary_round_trip_is_exact_on_the_grid() {
        let img = FeatureMap::from_fn(Dims::new(1, 5, 7), |_, r, c| ((r * 7 + c) * 7 % 256) as f64 / 255.0);
        let bytes = write_pgm(&img);
        assert!(bytes.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(read_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn smaller_maxval_scales() {
        let m = read_pgm(b"P2 2 1 4 1 4").unwrap();
        assert_eq!(m.values(), &[0.25, 1.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert_eq!(read_pgm(b"P6 1 1 255\n\0"), Err(PgmError::Magic));
        assert!(matches!(read_pgm(b"P5 2 2 255\n\0\0"), Err(PgmError::Data(_))));
        assert!(matches!(read_pgm(b"P5 1 1 65535\n\0\0"), Err(PgmError::MaxVal(65535))));
        assert!(matches!(read_pgm(b"P2 2 1 10 3 11"), Err(PgmError::Data(_))));
        assert!(matches!(read_pgm(b"P2 x"), Err(PgmError::Header(_))));
        assert!(matches!(read_pgm(b"P2 0 3 255"), Err(PgmError::Header(_))));
    }
}

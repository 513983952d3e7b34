//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::path::Path;

use super::{quantize, Image, ImagingError};

fn pnm_err(pos: usize, msg: impl Into<String>) -> ImagingError {
    ImagingError::Pnm {
        pos,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, ImagingError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(pnm_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pnm_err(start, format!("{what} out of range")))
    }
}

/// Parse a binary PPM/PGM byte stream.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImagingError> {
    if bytes.len() < 2 {
        return Err(pnm_err(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(pnm_err(0, "expected magic P5 or P6")),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let maxval_pos = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(pnm_err(maxval_pos, format!("unsupported maxval {maxval}, only 255")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(pnm_err(hdr.pos, "expected single whitespace after maxval")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| pnm_err(2, "dimensions overflow"))?;
    let payload = &bytes[hdr.pos..];
    if payload.len() < expected {
        return Err(pnm_err(
            bytes.len(),
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    let pixels = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, pixels)
}

/// Serialize as P6 (3 channels) or P5 (1 channel) after quantization.
pub fn encode_pnm(x: &Image) -> Vec<u8> {
    let magic = if x.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(quantize(x.pixels()).iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pnm(&bytes)
}

pub fn save_image(x: &Image, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(x)).map_err(|source| ImagingError::Io {
        path: path.display().to_string(),
        source,
    })
}

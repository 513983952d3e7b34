//! Applying and removing a mask on shareable 8-bit images, and the mask key
//! file.
//!
//! Key file layout, all integers little-endian:
//!
//! ```text
//! "P3MK" | u16 version | u16 height | u16 width | u8 channels | f64 epsilon
//!        | u16 len, owner id | u64 seed | f64 values | u32 CRC-32
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::imaging::{face_crop, quantize, resize_raw, CropSpec, Image, ImagingError};
use crate::maskgen::{MaskError, P3Mask};

const MAGIC: &[u8; 4] = b"P3MK";
pub const MASK_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ProtectError {
    #[error("mask file: bad magic")]
    Magic,
    #[error("mask file: CRC mismatch")]
    Crc,
    #[error("mask file: unsupported version {0}")]
    Version(u16),
    #[error("mask file: {0}")]
    Format(String),
    #[error("{face}-channel face, {mask}-channel mask")]
    Channels { face: usize, mask: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// The mask resized to the crop and snapped to the 1/255 grid.
fn crop_offsets(mask: &P3Mask, side: usize) -> Result<Vec<f64>, ProtectError> {
    let data = resize_raw(&mask.values, (mask.height, mask.width, mask.channels), side, side)?;
    Ok(quantize(&data))
}

fn shift_crop(x: &Image, mask: &P3Mask, crop: Option<CropSpec>, sign: f64) -> Result<Image, ProtectError> {
    let crop = crop.unwrap_or_else(|| CropSpec::centered(x.height(), x.width()));
    let face = face_crop(x, Some(crop))?;
    if face.channels() != mask.channels {
        return Err(ProtectError::Channels {
            face: face.channels(),
            mask: mask.channels,
        });
    }
    let offsets = crop_offsets(mask, crop.side)?;
    let shifted: Vec<f64> = face
        .pixels()
        .iter()
        .zip(&offsets)
        .map(|(p, m)| (p + sign * m).clamp(0.0, 1.0))
        .collect();
    let patch = Image::new(crop.side, crop.side, face.channels(), shifted)?;
    Ok(x.with_patch(crop, &patch)?.quantized())
}

/// Subtract the mask from the face crop and re-quantize the whole image.
pub fn mask_apply(x: &Image, mask: &P3Mask, crop: Option<CropSpec>) -> Result<Image, ProtectError> {
    shift_crop(x, mask, crop, -1.0)
}

/// Add the mask back onto the face crop. A wrong mask or crop is not
/// detectable and simply yields a different image.
pub fn unmask(x: &Image, mask: &P3Mask, crop: Option<CropSpec>) -> Result<Image, ProtectError> {
    shift_crop(x, mask, crop, 1.0)
}

/// Crop pixels that hit 0 or 1 under `mask_apply`, so the roundtrip cannot
/// restore them.
pub fn saturated_pixels(x: &Image, mask: &P3Mask, crop: Option<CropSpec>) -> Result<usize, ProtectError> {
    let crop = crop.unwrap_or_else(|| CropSpec::centered(x.height(), x.width()));
    let face = face_crop(x, Some(crop))?;
    let offsets = crop_offsets(mask, crop.side)?;
    Ok(face
        .pixels()
        .iter()
        .zip(&offsets)
        .filter(|(p, m)| {
            let v = *p - *m;
            !(0.0..=1.0).contains(&v)
        })
        .count())
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), ProtectError> {
    let v = u16::try_from(v).map_err(|_| ProtectError::Format(format!("{what} {v} exceeds u16")))?;
    out.extend(v.to_le_bytes());
    Ok(())
}

pub fn encode_mask(mask: &P3Mask) -> Result<Vec<u8>, ProtectError> {
    mask.validate()?;
    let mut out = MAGIC.to_vec();
    out.extend(MASK_VERSION.to_le_bytes());
    put_u16(&mut out, mask.height, "height")?;
    put_u16(&mut out, mask.width, "width")?;
    out.push(mask.channels as u8);
    out.extend(mask.epsilon.to_le_bytes());
    put_u16(&mut out, mask.owner.len(), "owner id length")?;
    out.extend(mask.owner.as_bytes());
    out.extend(mask.seed.to_le_bytes());
    for v in &mask.values {
        out.extend(v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtectError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ProtectError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtectError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<P3Mask, ProtectError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ProtectError::Magic);
    }
    if bytes.len() < 8 {
        return Err(ProtectError::Crc);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(ProtectError::Crc);
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = u16::from_le_bytes(r.array()?);
    if version != MASK_VERSION {
        return Err(ProtectError::Version(version));
    }
    let height = u16::from_le_bytes(r.array()?) as usize;
    let width = u16::from_le_bytes(r.array()?) as usize;
    let channels = r.array::<1>()?[0] as usize;
    let epsilon = f64::from_le_bytes(r.array()?);
    let len = u16::from_le_bytes(r.array()?) as usize;
    let owner = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| ProtectError::Format("owner id is not UTF-8".into()))?;
    let seed = u64::from_le_bytes(r.array()?);
    let n = height * width * channels;
    let values = (0..n)
        .map(|_| Ok(f64::from_le_bytes(r.array()?)))
        .collect::<Result<Vec<_>, ProtectError>>()?;
    if r.pos != body.len() {
        return Err(ProtectError::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mask = P3Mask {
        height,
        width,
        channels,
        epsilon,
        owner,
        seed,
        values,
    };
    mask.validate()?;
    Ok(mask)
}

pub fn mask_save(mask: &P3Mask, path: &Path) -> Result<(), ProtectError> {
    fs::write(path, encode_mask(mask)?).map_err(|source| ProtectError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn mask_load(path: &Path) -> Result<P3Mask, ProtectError> {
    let bytes = fs::read(path).map_err(|source| ProtectError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_mask(&bytes)
}

#[cfg(test)]
mod tests;

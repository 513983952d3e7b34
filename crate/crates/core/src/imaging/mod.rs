//! Float images in `[0, 1]`, the crop/resize/quantize pipeline operators,
//! SSIM, the wash-out filters used by adaptive adversaries, and PPM/PGM I/O.

mod filters;
mod jpeg;
mod pnm;
mod ssim;

pub use filters::{gaussian_filter, median_filter};
pub use jpeg::jpeg_filter;
pub use pnm::{decode_pnm, encode_pnm, load_image, save_image};
pub use ssim::{gaussian_window, ssim, ssim_var, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use thiserror::Error;

use crate::numerics::{quantize_value, resize_hwc};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {height}x{width}x{channels}")]
    InvalidDims {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferLength { got: usize, expected: usize },
    #[error("pixel {index} = {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("{op}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("crop (top={top}, left={left}, side={side}) exceeds {height}x{width} image")]
    CropOutOfBounds {
        top: usize,
        left: usize,
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed PNM at byte {pos}: {msg}")]
    Pnm { pos: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major, channel-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

/// Square face region inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl CropSpec {
    /// Centered square of side `min(height, width)`.
    pub fn centered(height: usize, width: usize) -> Self {
        let side = height.min(width);
        Self {
            top: (height - side) / 2,
            left: (width - side) / 2,
            side,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<(), ImagingError> {
        if self.side == 0 || self.top + self.side > height || self.left + self.side > width {
            return Err(ImagingError::CropOutOfBounds {
                top: self.top,
                left: self.left,
                side: self.side,
                height,
                width,
            });
        }
        Ok(())
    }
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        if height < MIN_SIDE || width < MIN_SIDE || !(channels == 1 || channels == 3) {
            return Err(ImagingError::InvalidDims {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(ImagingError::BufferLength {
                got: pixels.len(),
                expected,
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImagingError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Copy of this image with the crop region replaced by `patch`.
    pub fn with_patch(&self, crop: CropSpec, patch: &Image) -> Result<Image, ImagingError> {
        crop.validate(self.height, self.width)?;
        if patch.dims() != (crop.side, crop.side, self.channels) {
            return Err(ImagingError::ShapeMismatch {
                op: "with_patch",
                left: (crop.side, crop.side, self.channels),
                right: patch.dims(),
            });
        }
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..crop.side {
            let dst = ((crop.top + y) * self.width + crop.left) * c;
            let src = y * crop.side * c;
            out.pixels[dst..dst + crop.side * c]
                .copy_from_slice(&patch.pixels[src..src + crop.side * c]);
        }
        Ok(out)
    }

    /// Every pixel snapped to the 1/255 grid.
    pub fn quantized(&self) -> Image {
        Image {
            pixels: quantize(&self.pixels),
            ..self.clone()
        }
    }
}

/// The face crop; the centered square of side `min(height, width)` when no
/// spec is given.
pub fn face_crop(x: &Image, spec: Option<CropSpec>) -> Result<Image, ImagingError> {
    let spec = spec.unwrap_or_else(|| CropSpec::centered(x.height, x.width));
    spec.validate(x.height, x.width)?;
    let c = x.channels;
    let mut pixels = Vec::with_capacity(spec.side * spec.side * c);
    for y in spec.top..spec.top + spec.side {
        let start = (y * x.width + spec.left) * c;
        pixels.extend_from_slice(&x.pixels[start..start + spec.side * c]);
    }
    Image::new(spec.side, spec.side, c, pixels)
}

/// Corner-aligned bilinear resampling of a raw `[h, w, c]` buffer. Values are
/// not range-checked, so this also serves signed mask fields.
pub fn resize_raw(
    data: &[f64],
    dims: (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>, ImagingError> {
    let (h, w, c) = dims;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 || data.len() != h * w * c {
        return Err(ImagingError::InvalidParameter(format!(
            "cannot resize {h}x{w}x{c} buffer of {} values to {out_h}x{out_w}",
            data.len()
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(data.to_vec());
    }
    Ok(resize_hwc(data, dims, out_h, out_w))
}

/// Corner-aligned bilinear resize; same size returns an identical copy.
pub fn resize_bilinear(x: &Image, out_h: usize, out_w: usize) -> Result<Image, ImagingError> {
    let data = resize_raw(&x.pixels, x.dims(), out_h, out_w)?;
    // Interpolation between in-range values stays in range.
    Image::from_clamped(out_h, out_w, x.channels, data)
}

/// Snap each value to the nearest multiple of 1/255 (halves away from zero).
pub fn quantize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| quantize_value(v)).collect()
}

fn check_same_shape(op: &'static str, a: &Image, b: &Image) -> Result<(), ImagingError> {
    if a.dims() != b.dims() {
        return Err(ImagingError::ShapeMismatch {
            op,
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

/// Mirror index for half-sample symmetric borders (`d c b a | a b c d`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn rejects_invalid_images() {
        assert!(Image::new(4, 8, 1, vec![0.0; 32]).is_err());
        assert!(Image::new(8, 8, 2, vec![0.0; 128]).is_err());
        assert!(Image::new(8, 8, 1, vec![0.0; 63]).is_err());
        let mut px = vec![0.5; 64];
        px[10] = 1.5;
        assert!(matches!(
            Image::new(8, 8, 1, px),
            Err(ImagingError::OutOfRange { index: 10, .. })
        ));
    }

    #[test]
    fn crop_of_square_without_spec_is_identity() {
        let x = ramp(32, 32, 3);
        assert_eq!(face_crop(&x, None).unwrap(), x);
    }

    #[test]
    fn crop_of_tall_image_is_centered() {
        let x = ramp(48, 32, 1);
        let c = face_crop(&x, None).unwrap();
        assert_eq!(c.dims(), (32, 32, 1));
        assert_eq!(c.get(0, 0, 0), x.get(8, 0, 0));
        assert_eq!(c.get(31, 31, 0), x.get(39, 31, 0));
    }

    #[test]
    fn explicit_crop_takes_top_left_block() {
        let x = ramp(32, 32, 1);
        let c = face_crop(&x, Some(CropSpec { top: 0, left: 0, side: 16 })).unwrap();
        assert_eq!(c.dims(), (16, 16, 1));
        for y in 0..16 {
            for xx in 0..16 {
                assert_eq!(c.get(y, xx, 0), x.get(y, xx, 0));
            }
        }
        assert!(face_crop(&x, Some(CropSpec { top: 20, left: 0, side: 16 })).is_err());
    }

    #[test]
    fn identity_resize_is_bit_identical() {
        let x = ramp(17, 23, 3);
        assert_eq!(resize_bilinear(&x, 17, 23).unwrap(), x);
    }

    #[test]
    fn two_by_two_upsample_center() {
        let out = resize_raw(&[0.0, 1.0, 2.0, 3.0], (2, 2, 1), 3, 3).unwrap();
        assert_eq!(out[4], 1.5);
        assert_eq!(out, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn constant_resize_stays_exactly_constant() {
        for &v in &[0.1, 0.3, 0.7, 1.0 / 3.0] {
            let x = Image::filled(9, 13, 3, v).unwrap();
            for (h, w) in [(8, 8), (31, 17), (40, 40)] {
                let y = resize_bilinear(&x, h, w).unwrap();
                assert!(y.pixels().iter().all(|&p| p == v));
            }
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.5])[0], 128.0 / 255.0);
        assert!((quantize(&[0.5])[0] - 0.50196).abs() < 1e-5);
        assert_eq!(quantize(&[0.0])[0], 0.0);
        for k in 0..=255 {
            let v = k as f64 / 255.0;
            assert_eq!(quantize(&[v])[0], v);
        }
    }

    #[test]
    fn reflect_borders() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}

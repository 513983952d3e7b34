//! Lossy core of baseline JPEG: 8x8 DCT, quantization with the standard
//! luminance table scaled by quality, dequantization and inverse DCT.
//! Every channel uses the luminance table; there is no entropy coding and no
//! color transform.

use std::f64::consts::PI;

use super::{Image, ImagingError};

const BLOCK: usize = 8;

/// ITU T.81 Annex K, Table K.1.
const LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// libjpeg quality scaling.
fn scaled_table(quality: u8) -> [f64; 64] {
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(&LUMINANCE) {
        *o = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// `basis[u][x] = C(u) / 2 * cos((2x + 1) u pi / 16)`.
fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut b = [[0.0; BLOCK]; BLOCK];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
        }
    }
    b
}

fn roundtrip_block(block: &mut [f64; 64], table: &[f64; 64], basis: &[[f64; BLOCK]; BLOCK]) {
    let mut coef = [0.0; 64];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    s += basis[u][y] * basis[v][x] * block[y * BLOCK + x];
                }
            }
            let q = table[u * BLOCK + v];
            coef[u * BLOCK + v] = (s / q).round() * q;
        }
    }
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            let mut s = 0.0;
            for u in 0..BLOCK {
                for v in 0..BLOCK {
                    s += basis[u][y] * basis[v][x] * coef[u * BLOCK + v];
                }
            }
            block[y * BLOCK + x] = s;
        }
    }
}

/// JPEG-style compression roundtrip at `quality` in `[1, 100]`. Partial edge
/// blocks are padded by replicating the last row/column.
pub fn jpeg_filter(x: &Image, quality: u8) -> Result<Image, ImagingError> {
    if !(1..=100).contains(&quality) {
        return Err(ImagingError::InvalidParameter(format!(
            "jpeg quality must be in [1, 100], got {quality}"
        )));
    }
    let table = scaled_table(quality);
    let basis = dct_basis();
    let (h, w, c) = x.dims();
    let src = x.pixels();
    let mut out = vec![0.0; src.len()];
    let mut block = [0.0; 64];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for ch in 0..c {
                for y in 0..BLOCK {
                    let sy = (by + y).min(h - 1);
                    for xx in 0..BLOCK {
                        let sx = (bx + xx).min(w - 1);
                        block[y * BLOCK + xx] = src[(sy * w + sx) * c + ch] * 255.0 - 128.0;
                    }
                }
                roundtrip_block(&mut block, &table, &basis);
                for y in 0..BLOCK.min(h - by) {
                    for xx in 0..BLOCK.min(w - bx) {
                        out[((by + y) * w + bx + xx) * c + ch] =
                            (block[y * BLOCK + xx] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quality_tables() {
        assert!(scaled_table(100).iter().all(|&q| q == 1.0));
        assert_eq!(scaled_table(50)[0], 16.0);
        assert_eq!(scaled_table(50)[63], 99.0);
        assert_eq!(scaled_table(25)[0], 32.0);
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = dct_basis();
        for u in 0..BLOCK {
            for v in 0..BLOCK {
                let d: f64 = (0..BLOCK).map(|x| b[u][x] * b[v][x]).sum();
                let expected = if u == v { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_stays_flat() {
        let mid = Image::filled(20, 13, 3, 128.0 / 255.0).unwrap();
        let x = Image::filled(20, 13, 3, 100.0 / 255.0).unwrap();
        for q in [10, 50, 90] {
            let y = jpeg_filter(&mid, q).unwrap();
            assert!(y.pixels().iter().all(|v| (v - 128.0 / 255.0).abs() < 1e-9));
            // Only the DC term is nonzero; its quantization may shift the level.
            let y = jpeg_filter(&x, q).unwrap();
            let first = y.pixels()[0];
            assert!(y.pixels().iter().all(|v| (v - first).abs() < 1e-9));
            assert!((first - 100.0 / 255.0).abs() < 0.1);
        }
    }

    #[test]
    fn quality_100_is_nearly_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Image::new(16, 16, 3, (0..768).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = jpeg_filter(&x, 100).unwrap();
        let max = x
            .pixels()
            .iter()
            .zip(y.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max <= 0.02, "max deviation {max}");
    }

    #[test]
    fn lower_quality_loses_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Image::new(16, 16, 1, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let err = |q| {
            let y = jpeg_filter(&x, q).unwrap();
            x.pixels().iter().zip(y.pixels()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!(err(20) > err(90));
        assert!(jpeg_filter(&x, 0).is_err());
        assert!(jpeg_filter(&x, 101).is_err());
    }
}

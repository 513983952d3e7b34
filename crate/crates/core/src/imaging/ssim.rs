//! Structural similarity with an 11x11 Gaussian window (sigma 1.5) over
//! valid window positions, constants for a dynamic range of 1.0. Images with
//! a side shorter than the window fall back to global statistics. The result
//! is the mean of the SSIM map over all positions and channels.

use super::{check_same_shape, Image, ImagingError};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn uses_window(h: usize, w: usize) -> bool {
    h >= SSIM_WINDOW && w >= SSIM_WINDOW
}

/// Valid-mode separable filtering of an `[h, w, c]` buffer.
fn filter_separable(data: &[f64], (h, w, c): (usize, usize, usize), taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let wo = w - k + 1;
    let ho = h - k + 1;
    let mut rows = vec![0.0; h * wo * c];
    for y in 0..h {
        for x in 0..wo {
            for (t, &tap) in taps.iter().enumerate() {
                let src = (y * w + x + t) * c;
                let dst = (y * wo + x) * c;
                for ch in 0..c {
                    rows[dst + ch] += tap * data[src + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for (t, &tap) in taps.iter().enumerate() {
            for x in 0..wo {
                let src = ((y + t) * wo + x) * c;
                let dst = (y * wo + x) * c;
                for ch in 0..c {
                    out[dst + ch] += tap * rows[src + ch];
                }
            }
        }
    }
    out
}

/// Per-channel means of an `[h, w, c]` buffer, as a length-`c` map.
fn global_mean(data: &[f64], c: usize) -> Vec<f64> {
    let n = (data.len() / c) as f64;
    let mut out = vec![0.0; c];
    for px in data.chunks(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn ssim_map_mean(mx: &[f64], my: &[f64], exx: &[f64], eyy: &[f64], exy: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (mx2, my2, mxy) = (mx[i] * mx[i], my[i] * my[i], mx[i] * my[i]);
        let (sxx, syy, sxy) = (exx[i] - mx2, eyy[i] - my2, exy[i] - mxy);
        let num = (2.0 * mxy + SSIM_C1) * (2.0 * sxy + SSIM_C2);
        let den = (mx2 + my2 + SSIM_C1) * (sxx + syy + SSIM_C2);
        total += num / den;
    }
    total / mx.len() as f64
}

/// Mean SSIM between two equally shaped images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImagingError> {
    check_same_shape("ssim", a, b)?;
    let dims = a.dims();
    let (x, y) = (a.pixels(), b.pixels());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let stat = |d: &[f64]| {
        if uses_window(dims.0, dims.1) {
            filter_separable(d, dims, &gaussian_window())
        } else {
            global_mean(d, dims.2)
        }
    };
    Ok(ssim_map_mean(
        &stat(x),
        &stat(y),
        &stat(&xx),
        &stat(&yy),
        &stat(&xy),
    ))
}

/// Differentiable SSIM between two `[h, w, c]` graph values.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var, NumericsError> {
    let s = g.shape(a).to_vec();
    if s != g.shape(b) || s.len() != 3 {
        return Err(NumericsError::ShapeMismatch {
            op: "ssim",
            left: s,
            right: g.shape(b).to_vec(),
        });
    }
    let (h, w) = (s[0], s[1]);
    let kernel = if uses_window(h, w) {
        let taps = gaussian_window();
        let data = taps
            .iter()
            .flat_map(|&p| taps.iter().map(move |&q| p * q))
            .collect();
        Tensor::new(vec![SSIM_WINDOW, SSIM_WINDOW], data)?
    } else {
        Tensor::filled(&[h, w], 1.0 / (h * w) as f64)
    };
    let mx = g.filter2d(a, &kernel)?;
    let my = g.filter2d(b, &kernel)?;
    let xx = g.mul(a, a)?;
    let yy = g.mul(b, b)?;
    let xy = g.mul(a, b)?;
    let exx = g.filter2d(xx, &kernel)?;
    let eyy = g.filter2d(yy, &kernel)?;
    let exy = g.filter2d(xy, &kernel)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;

    let n1 = g.scale(mxy, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(sxy, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let d1 = g.add(mx2, my2)?;
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(sxx, syy)?;
    let d2 = g.add_scalar(d2, SSIM_C2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

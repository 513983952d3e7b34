use super::{reflect_index, Image, ImagingError};

/// Separable Gaussian blur with reflected borders. The kernel radius is
/// `ceil(3 * sigma)`.
pub fn gaussian_filter(x: &Image, sigma: f64) -> Result<Image, ImagingError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImagingError::InvalidParameter(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / norm).collect();

    let (h, w, c) = x.dims();
    let src = x.pixels();
    let mut rows = vec![0.0; src.len()];
    for y in 0..h {
        for xx in 0..w {
            for (t, &tap) in taps.iter().enumerate() {
                let sx = reflect_index(xx as isize + t as isize - radius, w);
                for ch in 0..c {
                    rows[(y * w + xx) * c + ch] += tap * src[(y * w + sx) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (t, &tap) in taps.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - radius, h);
            for xx in 0..w {
                for ch in 0..c {
                    out[(y * w + xx) * c + ch] += tap * rows[(sy * w + xx) * c + ch];
                }
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

/// `k x k` median with reflected borders; `k` must be odd and at least 3.
pub fn median_filter(x: &Image, k: usize) -> Result<Image, ImagingError> {
    if k < 3 || k % 2 == 0 {
        return Err(ImagingError::InvalidParameter(format!(
            "median window must be odd and >= 3, got {k}"
        )));
    }
    let (h, w, c) = x.dims();
    let r = (k / 2) as isize;
    let src = x.pixels();
    let mut out = vec![0.0; src.len()];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    let sy = reflect_index(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = reflect_index(xx as isize + dx, w);
                        window.push(src[(sy * w + sx) * c + ch]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                out[(y * w + xx) * c + ch] = *m;
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

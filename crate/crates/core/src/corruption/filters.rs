//! Spatial filtering primitives on `H x W x 3` images.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Half-sample symmetric border index (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Correlates each channel with `kernel` (odd-sized, centered).
pub(crate) fn convolve(img: &Array3<f64>, kernel: &Array2<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let taps: Vec<(isize, isize, f64)> = kernel
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((dy, dx), &v)| (dy as isize - ry, dx as isize - rx, v))
        .collect();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx, k) in &taps {
                let sy = reflect(y as isize + dy, h);
                let sx = reflect(x as isize + dx, w);
                for ch in 0..c {
                    out[[y, x, ch]] += k * img[[sy, sx, ch]];
                }
            }
        }
    }
    out
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur with reflected borders.
pub(crate) fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_taps(sigma);
    let n = taps.len();
    let row = Array2::from_shape_vec((1, n), taps.clone()).expect("tap count matches shape");
    let col = Array2::from_shape_vec((n, 1), taps).expect("tap count matches shape");
    convolve(&convolve(img, &row), &col)
}

/// Bilinear sample of one channel with coordinates clamped to the image.
pub(crate) fn sample_bilinear(img: &Array3<f64>, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
    let bottom = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Toroidal diamond-square height map of side `size` (a power of two),
/// normalized to `[0, 1]`. Larger `decay` gives smoother maps.
pub(crate) fn plasma_fractal(size: usize, decay: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(size.is_power_of_two(), "plasma map size must be a power of two");
    let mut map = Array2::<f64>::zeros((size, size));
    let mut step = size;
    let mut wibble = 100.0_f64;
    let jitter = |rng: &mut ChaCha8Rng, wibble: f64| rng.gen_range(-wibble..=wibble);
    while step >= 2 {
        let half = step / 2;
        // Square centers from the four corners.
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let (y1, x1) = ((y + step) % size, (x + step) % size);
                let mean = (map[[y, x]] + map[[y1, x]] + map[[y, x1]] + map[[y1, x1]]) / 4.0;
                map[[y + half, x + half]] = mean + jitter(rng, wibble);
            }
        }
        // Diamond points from their four neighbours.
        for y in (0..size).step_by(half) {
            let x_start = if (y / half).is_multiple_of(2) { half } else { 0 };
            for x in (x_start..size).step_by(step) {
                let up = map[[(y + size - half) % size, x]];
                let down = map[[(y + half) % size, x]];
                let left = map[[y, (x + size - half) % size]];
                let right = map[[y, (x + half) % size]];
                map[[y, x]] = (up + down + left + right) / 4.0 + jitter(rng, wibble);
            }
        }
        step = half;
        wibble /= decay;
    }
    let min = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let max = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (max - min).max(f64::MIN_POSITIVE);
    map.mapv(|v| (v - min) / span)
}

/// Smallest power of two covering both image sides.
pub(crate) fn fractal_side(h: usize, w: usize) -> usize {
    h.max(w).max(2).next_power_of_two()
}

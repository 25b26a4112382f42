//! Per-kind recipes and their severity tables. Spatial constants are sized
//! for 64-pixel images.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::filters::{convolve, fractal_side, gaussian_blur, plasma_fractal, sample_bilinear};

pub(crate) const GAUSSIAN_SIGMA: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
pub(crate) const SHOT_RATE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub(crate) const IMPULSE_AMOUNT: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
pub(crate) const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
/// `(sigma, max_delta, iterations)`.
pub(crate) const GLASS: [(f64, isize, usize); 5] = [(0.5, 1, 1), (0.7, 1, 2), (0.8, 2, 2), (0.9, 2, 3), (1.0, 3, 3)];
pub(crate) const MOTION_LENGTH: [f64; 5] = [3.0, 5.0, 7.0, 9.0, 11.0];
pub(crate) const SNOW: [SnowParams; 5] = [
    SnowParams { loc: 0.1, threshold: 0.6, streak: 2.0, blend: 0.85 },
    SnowParams { loc: 0.2, threshold: 0.6, streak: 3.0, blend: 0.75 },
    SnowParams { loc: 0.3, threshold: 0.6, streak: 4.0, blend: 0.65 },
    SnowParams { loc: 0.4, threshold: 0.6, streak: 5.0, blend: 0.6 },
    SnowParams { loc: 0.5, threshold: 0.6, streak: 6.0, blend: 0.55 },
];
/// Blend weight toward the frost texture.
pub(crate) const FROST: [f64; 5] = [0.25, 0.35, 0.45, 0.55, 0.65];
/// `(strength, roughness decay)`.
pub(crate) const FOG: [(f64, f64); 5] = [(1.0, 2.0), (1.5, 2.0), (2.0, 1.7), (2.5, 1.5), (3.0, 1.4)];
pub(crate) const CONTRAST: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];
pub(crate) const PIXELATE: [f64; 5] = [0.6, 0.5, 0.4, 0.3, 0.25];

const SNOW_SCALE: f64 = 0.3;
const FROST_TINT: [f64; 3] = [0.86, 0.92, 1.0];

#[derive(Debug, Clone, Copy)]
pub(crate) struct SnowParams {
    pub loc: f64,
    pub threshold: f64,
    pub streak: f64,
    pub blend: f64,
}

pub(crate) fn gaussian_noise(mut img: Array3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let normal = Normal::new(0.0, sigma).expect("table sigma is positive");
    img.iter_mut().for_each(|v| *v += normal.sample(rng));
    img
}

pub(crate) fn shot_noise(mut img: Array3<f64>, rate: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    for v in img.iter_mut() {
        let lambda = *v * rate;
        *v = if lambda > 0.0 {
            let poisson = Poisson::new(lambda).expect("positive rate");
            poisson.sample(rng) / rate
        } else {
            0.0
        };
    }
    img
}

pub(crate) fn impulse_noise(mut img: Array3<f64>, amount: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    for v in img.iter_mut() {
        if rng.gen::<f64>() < amount {
            *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        }
    }
    img
}

/// Normalized disk kernel with anti-aliased (4x4 supersampled) edges.
fn disk_kernel(radius: f64) -> Array2<f64> {
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = Array2::zeros((size, size));
    const SS: usize = 4;
    for ((y, x), v) in k.indexed_iter_mut() {
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let dy = y as f64 - r as f64 + (sy as f64 + 0.5) / SS as f64 - 0.5;
                let dx = x as f64 - r as f64 + (sx as f64 + 0.5) / SS as f64 - 0.5;
                if dy * dy + dx * dx <= radius * radius {
                    hits += 1;
                }
            }
        }
        *v = hits as f64;
    }
    let total = k.sum();
    k / total
}

pub(crate) fn defocus_blur(img: &Array3<f64>, radius: f64) -> Array3<f64> {
    convolve(img, &disk_kernel(radius))
}

pub(crate) fn glass_blur(
    img: &Array3<f64>,
    (sigma, delta, iterations): (f64, isize, usize),
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let mut out = gaussian_blur(img, sigma);
    let (hi, wi) = (h as isize, w as isize);
    for _ in 0..iterations {
        for y in (delta..hi - delta).rev() {
            for x in (delta..wi - delta).rev() {
                let dy = rng.gen_range(-delta..delta);
                let dx = rng.gen_range(-delta..delta);
                let (py, px) = ((y + dy) as usize, (x + dx) as usize);
                for ch in 0..c {
                    let tmp = out[[y as usize, x as usize, ch]];
                    out[[y as usize, x as usize, ch]] = out[[py, px, ch]];
                    out[[py, px, ch]] = tmp;
                }
            }
        }
    }
    gaussian_blur(&out, sigma)
}

/// Averages `length` bilinear samples along a centered line at `angle`.
fn line_blur(img: &Array3<f64>, length: f64, angle: f64) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let n = length.round().max(1.0) as usize;
    let (sin, cos) = angle.sin_cos();
    let offsets: Vec<(f64, f64)> = (0..n)
        .map(|t| {
            let d = t as f64 - (n - 1) as f64 / 2.0;
            (d * sin, d * cos)
        })
        .collect();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let acc: f64 =
                    offsets.iter().map(|(oy, ox)| sample_bilinear(img, y as f64 + oy, x as f64 + ox, ch)).sum();
                out[[y, x, ch]] = acc / n as f64;
            }
        }
    }
    out
}

pub(crate) fn motion_blur(img: &Array3<f64>, length: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let angle = rng.gen_range(-45.0_f64..45.0).to_radians();
    line_blur(img, length, angle)
}

pub(crate) fn snow(img: Array3<f64>, p: SnowParams, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let normal = Normal::new(p.loc, SNOW_SCALE).expect("positive scale");
    let mut layer = Array3::zeros((h, w, 1));
    for v in layer.iter_mut() {
        let s: f64 = normal.sample(rng);
        *v = if s < p.threshold { 0.0 } else { s };
    }
    let angle = rng.gen_range(-135.0_f64..-45.0).to_radians();
    let layer = line_blur(&layer, p.streak, angle);

    let mut out = img;
    for y in 0..h {
        for x in 0..w {
            let gray = 0.299 * out[[y, x, 0]] + 0.587 * out[[y, x, 1]] + 0.114 * out[[y, x, 2]];
            let flake = layer[[y, x, 0]] + layer[[h - 1 - y, w - 1 - x, 0]];
            for ch in 0..3 {
                let v = out[[y, x, ch]];
                let whitened = v.max(gray * 1.5 + 0.5);
                out[[y, x, ch]] = p.blend * v + (1.0 - p.blend) * whitened + flake;
            }
        }
    }
    out
}

pub(crate) fn frost(mut img: Array3<f64>, weight: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let side = fractal_side(h, w);
    let coarse = plasma_fractal(side, 1.6, rng);
    let fine = plasma_fractal(side, 1.1, rng);
    for ((y, x, ch), v) in img.indexed_iter_mut() {
        // Bright crystalline texture: smooth sheets plus high-frequency grain.
        let t = 0.45 + 0.35 * coarse[[y, x]] + 0.2 * fine[[y, x]].powf(1.5);
        *v = (1.0 - weight) * *v + weight * t * FROST_TINT[ch];
    }
    img
}

pub(crate) fn fog(mut img: Array3<f64>, (strength, decay): (f64, f64), rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let map = plasma_fractal(fractal_side(h, w), decay, rng);
    let max = img.fold(0.0_f64, |a, &b| a.max(b));
    let scale = if max > 0.0 { max / (max + strength) } else { 1.0 / (1.0 + strength) };
    for ((y, x, _), v) in img.indexed_iter_mut() {
        *v = (*v + strength * map[[y, x]]) * scale;
    }
    img
}

pub(crate) fn contrast(mut img: Array3<f64>, factor: f64) -> Array3<f64> {
    let means = img.mean_axis(Axis(0)).and_then(|m| m.mean_axis(Axis(0))).expect("non-empty image");
    for ((_, _, ch), v) in img.indexed_iter_mut() {
        *v = (*v - means[ch]) * factor + means[ch];
    }
    img
}

/// Box-filter downsampling to `round(side * factor)` followed by
/// nearest-neighbour upsampling.
pub(crate) fn pixelate(img: &Array3<f64>, factor: f64) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let nh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let nw = ((w as f64 * factor).round() as usize).clamp(1, w);
    let block = |i: usize, n: usize, full: usize| (i * full / n, ((i + 1) * full / n).max(i * full / n + 1));
    let mut out = Array3::zeros((h, w, c));
    for by in 0..nh {
        let (y0, y1) = block(by, nh, h);
        for bx in 0..nw {
            let (x0, x1) = block(bx, nw, w);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[[y, x, ch]];
                    }
                }
                let mean = acc / count;
                for y in y0..y1 {
                    for x in x0..x1 {
                        out[[y, x, ch]] = mean;
                    }
                }
            }
        }
    }
    out
}

//! HSV helpers and the two HSV-channel corruptions.

use ndarray::{Array3, Axis};

/// Value-channel gain per severity; multiplicative so black stays black.
pub(crate) const BRIGHTNESS_GAIN: [f64; 5] = [1.1, 1.2, 1.3, 1.4, 1.5];
/// Saturation gain per severity.
pub(crate) const SATURATION_GAIN: [f64; 5] = [1.5, 2.0, 3.0, 5.0, 10.0];

pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_hsv(mut img: Array3<f64>, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Array3<f64> {
    for mut px in img.lanes_mut(Axis(2)) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    img
}

pub(crate) fn brightness(img: Array3<f64>, gain: f64) -> Array3<f64> {
    map_hsv(img, |h, s, v| (h, s, (v * gain).min(1.0)))
}

pub(crate) fn saturate(img: Array3<f64>, gain: f64) -> Array3<f64> {
    map_hsv(img, |h, s, v| (h, (s * gain).min(1.0), v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for i in 0..1000 {
            let r = ((i * 37) % 101) as f64 / 100.0;
            let g = ((i * 53) % 101) as f64 / 100.0;
            let b = ((i * 71) % 101) as f64 / 100.0;
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturate_leaves_grays_alone() {
        let img = Array3::from_elem((2, 2, 3), 0.4);
        let out = saturate(img.clone(), 5.0);
        assert!(out.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

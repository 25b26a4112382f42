//! Building blocks of the toy detector. Activations are stored channel-major
//! as `C x (B*H*W)` matrices so that convolutions become a single GEMM over
//! the whole batch and normalization statistics are row reductions.

use ndarray::{Array1, Array2, Axis};

/// Spatial geometry of a channel-major activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Output geometry of a 3x3, padding-1 convolution with `stride`.
    pub fn conv3x3(&self, stride: usize) -> Geometry {
        Geometry { batch: self.batch, height: (self.height - 1) / stride + 1, width: (self.width - 1) / stride + 1 }
    }
}

/// Unfolds 3x3 patches (zero padding 1) into a `(C*9) x N_out` matrix.
pub fn im2col(x: &Array2<f64>, geom: Geometry, stride: usize) -> Array2<f64> {
    let channels = x.nrows();
    let out = geom.conv3x3(stride);
    let n_out = out.positions();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let plane_in = geom.height * geom.width;
    let plane_out = out.height * out.width;
    let src = x.as_slice().expect("activation matrices are contiguous");
    let mut cols = vec![0.0; channels * 9 * n_out];
    for ch in 0..channels {
        let src_ch = &src[ch * geom.positions()..(ch + 1) * geom.positions()];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ch * 9 + (ky * 3 + kx) as usize) * n_out;
                for b in 0..geom.batch {
                    let src_img = &src_ch[b * plane_in..(b + 1) * plane_in];
                    let dst_img = &mut cols[row + b * plane_out..row + (b + 1) * plane_out];
                    for oy in 0..out.height {
                        let iy = (oy * stride) as isize + ky - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src_row = &src_img[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        let dst_row = &mut dst_img[oy * out.width..(oy + 1) * out.width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx - 1;
                            if ix >= 0 && ix < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((channels * 9, n_out), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub fn col2im(cols: &Array2<f64>, channels: usize, geom: Geometry, stride: usize) -> Array2<f64> {
    let out = geom.conv3x3(stride);
    let n_out = out.positions();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let plane_in = geom.height * geom.width;
    let plane_out = out.height * out.width;
    let src = cols.as_slice().expect("column matrices are contiguous");
    let mut dst = vec![0.0; channels * geom.positions()];
    for ch in 0..channels {
        let dst_ch = &mut dst[ch * geom.positions()..(ch + 1) * geom.positions()];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ch * 9 + (ky * 3 + kx) as usize) * n_out;
                for b in 0..geom.batch {
                    let src_img = &src[row + b * plane_out..row + (b + 1) * plane_out];
                    let dst_img = &mut dst_ch[b * plane_in..(b + 1) * plane_in];
                    for oy in 0..out.height {
                        let iy = (oy * stride) as isize + ky - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst_row = &mut dst_img[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        let src_row = &src_img[oy * out.width..(oy + 1) * out.width];
                        for (ox, &g) in src_row.iter().enumerate() {
                            let ix = (ox * stride) as isize + kx - 1;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((channels, geom.positions()), dst).expect("col2im shape")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-row mean and biased variance.
pub fn row_moments(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / n;
    let mut var = Array1::zeros(x.nrows());
    for (r, row) in x.outer_iter().enumerate() {
        let m = mean[r];
        var[r] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    (mean, var)
}

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{col2im, im2col, row_moments, sigmoid, silu, silu_grad, Geometry};
use crate::detection::HeatmapBatch;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::PROB_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Layer list of the detector: conv3x3 -> norm -> SiLU blocks followed by
/// a shared 3x3 head producing class logits and box sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_size: usize,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
    pub size_channels: usize,
    /// Box sizes are regressed in units of this many pixels.
    pub size_scale: f64,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            blocks: vec![
                BlockSpec { out_channels: 16, stride: 2 },
                BlockSpec { out_channels: 16, stride: 2 },
                BlockSpec { out_channels: 16, stride: 1 },
                BlockSpec { out_channels: 16, stride: 1 },
            ],
            classes: 3,
            size_channels: 2,
            size_scale: 8.0,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

impl ArchDescriptor {
    pub fn downsample(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn output_size(&self) -> usize {
        self.blocks.iter().fold(self.input_size, |s, b| (s - 1) / b.stride + 1)
    }

    fn block_inputs(&self) -> Vec<usize> {
        let mut ins = vec![self.in_channels];
        ins.extend(self.blocks.iter().map(|b| b.out_channels));
        ins.truncate(self.blocks.len());
        ins
    }

    fn head_outputs(&self) -> usize {
        self.classes + self.size_channels
    }
}

/// Identifies one parameter tensor of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    ConvWeight(usize),
    NormScale(usize),
    NormShift(usize),
    RunningMean(usize),
    RunningVar(usize),
    HeadWeight,
    HeadBias,
}

impl ParamRef {
    pub fn name(&self) -> String {
        match self {
            ParamRef::ConvWeight(l) => format!("block{l}.conv.weight"),
            ParamRef::NormScale(l) => format!("block{l}.norm.scale"),
            ParamRef::NormShift(l) => format!("block{l}.norm.shift"),
            ParamRef::RunningMean(l) => format!("block{l}.norm.running_mean"),
            ParamRef::RunningVar(l) => format!("block{l}.norm.running_var"),
            ParamRef::HeadWeight => "head.weight".into(),
            ParamRef::HeadBias => "head.bias".into(),
        }
    }

    /// Running statistics are state, not trainable weights.
    pub fn is_trainable(&self) -> bool {
        !matches!(self, ParamRef::RunningMean(_) | ParamRef::RunningVar(_))
    }
}

/// How normalization layers obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (plain inference).
    Running,
    /// Statistics of the current batch.
    Batch,
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    arch: ArchDescriptor,
    conv: Vec<Array2<f64>>,
    scale: Vec<Array1<f64>>,
    shift: Vec<Array1<f64>>,
    running_mean: Vec<Array1<f64>>,
    running_var: Vec<Array1<f64>>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

struct BlockCache {
    input_geom: Geometry,
    cols: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre_act: Array2<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

/// Intermediate values kept from a forward pass for the backward pass.
pub struct ForwardCache {
    mode: NormMode,
    blocks: Vec<BlockCache>,
    head_geom: Geometry,
    head_cols: Array2<f64>,
    /// sigmoid(logit) before clamping, `K x N`.
    probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub heatmap: HeatmapBatch,
    /// `B x size_channels x H x W` raw size regressions.
    pub size: Array4<f64>,
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    NormAffine,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv: Vec<Option<Array2<f64>>>,
    pub scale: Vec<Array1<f64>>,
    pub shift: Vec<Array1<f64>>,
    pub head_w: Option<Array2<f64>>,
    pub head_b: Option<Array1<f64>>,
}

impl Gradients {
    pub fn get(&self, param: ParamRef) -> Option<&[f64]> {
        let slice = match param {
            ParamRef::ConvWeight(l) => self.conv[l].as_ref()?.as_slice(),
            ParamRef::NormScale(l) => self.scale[l].as_slice(),
            ParamRef::NormShift(l) => self.shift[l].as_slice(),
            ParamRef::HeadWeight => self.head_w.as_ref()?.as_slice(),
            ParamRef::HeadBias => self.head_b.as_ref()?.as_slice(),
            ParamRef::RunningMean(_) | ParamRef::RunningVar(_) => None,
        };
        slice
    }
}

impl ToyDetector {
    /// Fresh model with Kaiming-normal convolutions, identity normalization
    /// and a head biased towards low initial confidence.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        if arch.blocks.is_empty() {
            return Err(Error::NoNormalizationLayers);
        }
        if arch.classes == 0 || arch.in_channels == 0 {
            return Err(Error::invalid("architecture needs classes and input channels"));
        }
        let mut rng = rng_from(seed);
        let mut normal =
            |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect() };
        let mut conv = Vec::new();
        for (spec, cin) in arch.blocks.iter().zip(arch.block_inputs()) {
            let fan_in = cin * 9;
            let w = normal(spec.out_channels * fan_in, (2.0 / fan_in as f64).sqrt());
            conv.push(Array2::from_shape_vec((spec.out_channels, fan_in), w).expect("conv shape"));
        }
        let last = arch.blocks.last().expect("non-empty").out_channels;
        let head_w =
            Array2::from_shape_vec((arch.head_outputs(), last * 9), normal(arch.head_outputs() * last * 9, 0.01))
                .expect("head shape");
        let mut head_b = Array1::zeros(arch.head_outputs());
        for k in 0..arch.classes {
            // prior confidence of about 0.1
            head_b[k] = -2.19;
        }
        for s in 0..arch.size_channels {
            head_b[arch.classes + s] = 1.4;
        }
        let widths: Vec<usize> = arch.blocks.iter().map(|b| b.out_channels).collect();
        Ok(Self {
            scale: widths.iter().map(|&c| Array1::ones(c)).collect(),
            shift: widths.iter().map(|&c| Array1::zeros(c)).collect(),
            running_mean: widths.iter().map(|&c| Array1::zeros(c)).collect(),
            running_var: widths.iter().map(|&c| Array1::ones(c)).collect(),
            conv,
            head_w,
            head_b,
            arch,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn norm_layers(&self) -> usize {
        self.scale.len()
    }

    /// Every tensor in a fixed order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for l in 0..self.conv.len() {
            refs.extend([
                ParamRef::ConvWeight(l),
                ParamRef::NormScale(l),
                ParamRef::NormShift(l),
                ParamRef::RunningMean(l),
                ParamRef::RunningVar(l),
            ]);
        }
        refs.extend([ParamRef::HeadWeight, ParamRef::HeadBias]);
        refs
    }

    pub fn shape_of(&self, param: ParamRef) -> Vec<usize> {
        match param {
            ParamRef::ConvWeight(l) => self.conv[l].shape().to_vec(),
            ParamRef::NormScale(l) => self.scale[l].shape().to_vec(),
            ParamRef::NormShift(l) => self.shift[l].shape().to_vec(),
            ParamRef::RunningMean(l) => self.running_mean[l].shape().to_vec(),
            ParamRef::RunningVar(l) => self.running_var[l].shape().to_vec(),
            ParamRef::HeadWeight => self.head_w.shape().to_vec(),
            ParamRef::HeadBias => self.head_b.shape().to_vec(),
        }
    }

    pub fn tensor(&self, param: ParamRef) -> &[f64] {
        let s = match param {
            ParamRef::ConvWeight(l) => self.conv[l].as_slice(),
            ParamRef::NormScale(l) => self.scale[l].as_slice(),
            ParamRef::NormShift(l) => self.shift[l].as_slice(),
            ParamRef::RunningMean(l) => self.running_mean[l].as_slice(),
            ParamRef::RunningVar(l) => self.running_var[l].as_slice(),
            ParamRef::HeadWeight => self.head_w.as_slice(),
            ParamRef::HeadBias => self.head_b.as_slice(),
        };
        s.expect("parameters are contiguous")
    }

    pub fn tensor_mut(&mut self, param: ParamRef) -> &mut [f64] {
        let s = match param {
            ParamRef::ConvWeight(l) => self.conv[l].as_slice_mut(),
            ParamRef::NormScale(l) => self.scale[l].as_slice_mut(),
            ParamRef::NormShift(l) => self.shift[l].as_slice_mut(),
            ParamRef::RunningMean(l) => self.running_mean[l].as_slice_mut(),
            ParamRef::RunningVar(l) => self.running_var[l].as_slice_mut(),
            ParamRef::HeadWeight => self.head_w.as_slice_mut(),
            ParamRef::HeadBias => self.head_b.as_slice_mut(),
        };
        s.expect("parameters are contiguous")
    }

    /// Runs the network on `B x C x S x S` images.
    pub fn forward(&self, images: ArrayView4<'_, f64>, mode: NormMode) -> Result<(DetectorOutput, ForwardCache)> {
        let (b, c, h, w) = images.dim();
        let s = self.arch.input_size;
        if b == 0 || c != self.arch.in_channels || h != s || w != s {
            return Err(Error::Shape {
                expected: format!("Bx{}x{s}x{s} with B >= 1", self.arch.in_channels),
                actual: format!("{b}x{c}x{h}x{w}"),
            });
        }
        let mut geom = Geometry { batch: b, height: h, width: w };
        // NCHW -> C x (B*H*W)
        let mut act = images
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, geom.positions()))
            .expect("contiguous");

        let mut blocks = Vec::with_capacity(self.conv.len());
        for (l, spec) in self.arch.blocks.iter().enumerate() {
            let cols = im2col(&act, geom, spec.stride);
            let out_geom = geom.conv3x3(spec.stride);
            let x = self.conv[l].dot(&cols);
            let (batch_mean, batch_var) = row_moments(&x);
            let (mean, var) = match mode {
                NormMode::Batch => (&batch_mean, &batch_var),
                NormMode::Running => (&self.running_mean[l], &self.running_var[l]),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + self.arch.norm_eps).sqrt());
            let mut xhat = x;
            for (r, mut row) in xhat.outer_iter_mut().enumerate() {
                let (m, is) = (mean[r], inv_std[r]);
                row.mapv_inplace(|v| (v - m) * is);
            }
            let mut pre_act = xhat.clone();
            for (r, mut row) in pre_act.outer_iter_mut().enumerate() {
                let (g, sh) = (self.scale[l][r], self.shift[l][r]);
                row.mapv_inplace(|v| g * v + sh);
            }
            act = pre_act.mapv(silu);
            blocks.push(BlockCache { input_geom: geom, cols, xhat, inv_std, pre_act, batch_mean, batch_var });
            geom = out_geom;
        }

        let head_cols = im2col(&act, geom, 1);
        let mut head = self.head_w.dot(&head_cols);
        for (r, mut row) in head.outer_iter_mut().enumerate() {
            let bias = self.head_b[r];
            row.mapv_inplace(|v| v + bias);
        }
        let k = self.arch.classes;
        let probs = head.slice(ndarray::s![..k, ..]).mapv(sigmoid);
        let heat = to_nchw(&probs, geom);
        let size = to_nchw(&head.slice(ndarray::s![k.., ..]).to_owned(), geom);
        let output = DetectorOutput { heatmap: HeatmapBatch::new(heat)?, size };
        Ok((output, ForwardCache { mode, blocks, head_geom: geom, head_cols, probs }))
    }

    /// Backward pass from gradients on the (clamped) heatmap and the size map.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_heatmap: ArrayView4<'_, f64>,
        d_size: Option<ArrayView4<'_, f64>>,
        scope: GradScope,
    ) -> Gradients {
        let mut d_logits = from_nchw(d_heatmap);
        for (g, &p) in d_logits.iter_mut().zip(cache.probs.iter()) {
            // the clamp has zero derivative outside its interior
            *g = if p > PROB_EPS && p < 1.0 - PROB_EPS { *g * p * (1.0 - p) } else { 0.0 };
        }
        self.backward_logits(cache, d_logits, d_size, scope)
    }

    /// Backward pass from gradients already expressed w.r.t. class logits
    /// (`B x K x H x W`).
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        d_logits: ArrayView4<'_, f64>,
        d_size: Option<ArrayView4<'_, f64>>,
        scope: GradScope,
    ) -> Gradients {
        self.backward_logits(cache, from_nchw(d_logits), d_size, scope)
    }

    fn backward_logits(
        &self,
        cache: &ForwardCache,
        d_logits: Array2<f64>,
        d_size: Option<ArrayView4<'_, f64>>,
        scope: GradScope,
    ) -> Gradients {
        let k = self.arch.classes;
        let n = cache.head_geom.positions();
        let mut d_head = Array2::zeros((self.arch.head_outputs(), n));
        d_head.slice_mut(ndarray::s![..k, ..]).assign(&d_logits);
        if let Some(ds) = d_size {
            d_head.slice_mut(ndarray::s![k.., ..]).assign(&from_nchw(ds));
        }
        let all = scope == GradScope::All;
        let (head_w, head_b) =
            if all { (Some(d_head.dot(&cache.head_cols.t())), Some(d_head.sum_axis(Axis(1)))) } else { (None, None) };
        let last_channels = self.head_w.ncols() / 9;
        let mut d_act = col2im(&self.head_w.t().dot(&d_head), last_channels, cache.head_geom, 1);

        let layers = self.conv.len();
        let mut conv = vec![None; layers];
        let mut scale = vec![Array1::zeros(0); layers];
        let mut shift = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            let bc = &cache.blocks[l];
            let mut d_y = d_act;
            for (g, &y) in d_y.iter_mut().zip(bc.pre_act.iter()) {
                *g *= silu_grad(y);
            }
            shift[l] = d_y.sum_axis(Axis(1));
            scale[l] = (&d_y * &bc.xhat).sum_axis(Axis(1));
            let mut d_x = d_y;
            let npos = d_x.ncols() as f64;
            for (r, mut row) in d_x.outer_iter_mut().enumerate() {
                let g = self.scale[l][r];
                let is = bc.inv_std[r];
                match cache.mode {
                    NormMode::Running => row.mapv_inplace(|v| v * g * is),
                    NormMode::Batch => {
                        // d_xhat = g * d_y; dx = is/N (N d_xhat - sum d_xhat - xhat sum(d_xhat xhat))
                        let sum_dxhat = g * shift[l][r];
                        let sum_dxhat_xhat = g * scale[l][r];
                        let xhat = bc.xhat.row(r);
                        for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
                            *v = is / npos * (npos * g * *v - sum_dxhat - xh * sum_dxhat_xhat);
                        }
                    }
                }
            }
            if all {
                conv[l] = Some(d_x.dot(&bc.cols.t()));
            }
            if l > 0 {
                let cin = self.conv[l].ncols() / 9;
                let stride = self.arch.blocks[l].stride;
                d_act = col2im(&self.conv[l].t().dot(&d_x), cin, bc.input_geom, stride);
            } else {
                d_act = Array2::zeros((0, 0));
            }
        }
        Gradients { conv, scale, shift, head_w, head_b }
    }

    /// Blends the batch statistics of a training-mode forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.arch.norm_momentum;
        for (l, bc) in cache.blocks.iter().enumerate() {
            let n = bc.xhat.ncols() as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            self.running_mean[l] = &self.running_mean[l] * (1.0 - m) + &bc.batch_mean * m;
            self.running_var[l] = &self.running_var[l] * (1.0 - m) + &(&bc.batch_var * (m * unbiased));
        }
    }

    /// Pre-affine normalized activations of every norm layer from a forward
    /// pass, `C x N` each.
    pub fn normalized_activations<'a>(&self, cache: &'a ForwardCache) -> Vec<&'a Array2<f64>> {
        cache.blocks.iter().map(|b| &b.xhat).collect()
    }
}

/// `C x (B*H*W)` -> `B x C x H x W`.
fn to_nchw(x: &Array2<f64>, geom: Geometry) -> Array4<f64> {
    let c = x.nrows();
    x.to_owned()
        .into_shape_with_order((c, geom.batch, geom.height, geom.width))
        .expect("channel-major shape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// `B x C x H x W` -> `C x (B*H*W)`.
fn from_nchw(x: ArrayView4<'_, f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous")
}

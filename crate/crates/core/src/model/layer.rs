//! Layer geometry and the real-quantized layer arithmetic.
//!
//! For linear kinds the layer computes, per sample,
//!
//! ```text
//! acc = W̄ ⊛ x̄ + b̄                      (exact integer, b̄ at scale s_W·s_x)
//! z̄   = clip(round(acc · s_W·s_x / s_z), -128, 127)
//! ā   = h(z̄)
//! ```
//!
//! Pooling sums its window in integers and requantizes with `s_x / (H·W·s_z)`.

use crate::error::{Error, Result};
use crate::quant::{round_clip, BitWidth, QTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected {
        out_features: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
}

impl LayerKind {
    pub fn code(&self) -> u8 {
        match self {
            LayerKind::FullyConnected { .. } => 0,
            LayerKind::Conv2d { .. } => 1,
            LayerKind::DepthwiseConv2d { .. } => 2,
            LayerKind::GlobalAvgPool => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "dwconv2d",
            LayerKind::GlobalAvgPool => "gap",
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerKind::GlobalAvgPool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: &mut [i32]) {
        if self == Activation::Relu {
            for x in v.iter_mut() {
                if *x < 0 {
                    *x = 0;
                }
            }
        }
    }

    #[inline]
    pub fn apply_f64(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            _ => Err(Error::InvalidModel(format!("unknown activation code {c}"))),
        }
    }
}

/// Shape bookkeeping shared by the integer and floating-point forwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < k {
        return Err(Error::InvalidModel(format!(
            "kernel {k} with stride {stride}, padding {pad} does not fit input {size}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn chw(in_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *in_shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidModel(format!(
            "spatial layer expects [C, H, W] input, got {in_shape:?}"
        ))),
    }
}

impl Geometry {
    pub fn new(kind: LayerKind, in_shape: Vec<usize>) -> Result<Self> {
        if in_shape.is_empty() || in_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("bad input shape {in_shape:?}")));
        }
        let out_shape = match kind {
            LayerKind::FullyConnected { out_features } => {
                if out_features == 0 {
                    return Err(Error::InvalidModel("fc with zero outputs".into()));
                }
                vec![out_features]
            }
            LayerKind::Conv2d {
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                let (_, h, w) = chw(&in_shape)?;
                if out_channels == 0 {
                    return Err(Error::InvalidModel("conv with zero output channels".into()));
                }
                vec![
                    out_channels,
                    conv_out(h, kh, stride, padding)?,
                    conv_out(w, kw, stride, padding)?,
                ]
            }
            LayerKind::DepthwiseConv2d {
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                let (c, h, w) = chw(&in_shape)?;
                vec![
                    c,
                    conv_out(h, kh, stride, padding)?,
                    conv_out(w, kw, stride, padding)?,
                ]
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = chw(&in_shape)?;
                vec![c]
            }
        };
        Ok(Self {
            kind,
            in_shape,
            out_shape,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Weight tensor shape, or `None` for parameter-free kinds.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::FullyConnected { out_features } => Some(vec![out_features, self.in_len()]),
            LayerKind::Conv2d {
                out_channels,
                kernel: (kh, kw),
                ..
            } => Some(vec![out_channels, self.in_shape[0], kh, kw]),
            LayerKind::DepthwiseConv2d { kernel: (kh, kw), .. } => {
                Some(vec![self.in_shape[0], 1, kh, kw])
            }
            LayerKind::GlobalAvgPool => None,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::GlobalAvgPool => 0,
            _ => self.out_shape[0],
        }
    }

    /// Bias element feeding output element `out`.
    #[inline]
    pub fn bias_index(&self, out: usize) -> usize {
        match self.kind {
            LayerKind::FullyConnected { .. } => out,
            _ => out / (self.out_shape[1] * self.out_shape[2]),
        }
    }

    /// Multiply-accumulate count for one sample (window sums for pooling).
    pub fn macs(&self) -> u64 {
        let out = self.out_len() as u64;
        match self.kind {
            LayerKind::FullyConnected { .. } => out * self.in_len() as u64,
            LayerKind::Conv2d { kernel: (kh, kw), .. } => {
                out * (self.in_shape[0] * kh * kw) as u64
            }
            LayerKind::DepthwiseConv2d { kernel: (kh, kw), .. } => out * (kh * kw) as u64,
            LayerKind::GlobalAvgPool => self.in_len() as u64,
        }
    }

    /// Calls `f(out, weight, input)` for every multiply of the linear map.
    /// Padding taps are skipped. Does nothing for pooling.
    #[inline]
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self.kind {
            LayerKind::FullyConnected { out_features } => {
                let n = self.in_len();
                for o in 0..out_features {
                    let row = o * n;
                    for i in 0..n {
                        f(o, row + i, i);
                    }
                }
            }
            LayerKind::Conv2d {
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let out = (oc * oh + oy) * ow + ox;
                            for ic in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                        let ii = (ic * h + iy as usize) * w + ix as usize;
                                        f(out, wi, ii);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::DepthwiseConv2d {
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let out = (ch * oh + oy) * ow + ox;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let wi = (ch * kh + ky) * kw + kx;
                                    let ii = (ch * h + iy as usize) * w + ix as usize;
                                    f(out, wi, ii);
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::GlobalAvgPool => {}
        }
    }
}

/// One real-quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub(crate) geom: Geometry,
    pub(crate) weights: Option<QTensor>,
    pub(crate) bias: Option<QTensor>,
    pub(crate) s_w: f32,
    pub(crate) s_x: f32,
    pub(crate) s_z: f32,
    pub(crate) activation: Activation,
    /// Seed and radius of an applied, not yet removed, weight perturbation.
    pub(crate) pending: Option<(u32, i32)>,
}

impl LayerSpec {
    /// Linear layer from integer weights (8-bit) and biases (32-bit, at scale
    /// `s_w · s_x`).
    #[allow(clippy::too_many_arguments)]
    pub fn linear(
        kind: LayerKind,
        in_shape: Vec<usize>,
        weights: Vec<i32>,
        bias: Vec<i32>,
        s_w: f32,
        s_x: f32,
        s_z: f32,
        activation: Activation,
    ) -> Result<Self> {
        let geom = Geometry::new(kind, in_shape)?;
        let wshape = geom
            .weight_shape()
            .ok_or_else(|| Error::InvalidModel(format!("{} layer has no weights", kind.name())))?;
        let w = QTensor::from_raw(weights, wshape, s_w as f64, BitWidth::Int8, true)?;
        let b = QTensor::from_raw(
            bias,
            vec![geom.bias_len()],
            s_w as f64 * s_x as f64,
            BitWidth::Int32,
            true,
        )?;
        let layer = Self {
            geom,
            weights: Some(w),
            bias: Some(b),
            s_w,
            s_x,
            s_z,
            activation,
            pending: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn global_avg_pool(in_shape: Vec<usize>, s_x: f32, s_z: f32) -> Result<Self> {
        let layer = Self {
            geom: Geometry::new(LayerKind::GlobalAvgPool, in_shape)?,
            weights: None,
            bias: None,
            s_w: 1.0,
            s_x,
            s_z,
            activation: Activation::Identity,
            pending: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.s_w, self.s_x, self.s_z] {
            crate::quant::check_scale(s as f64)?;
        }
        if let (Some(w), Some(b)) = (&self.weights, &self.bias) {
            w.validate()?;
            b.validate()?;
            if Some(w.shape().to_vec()) != self.geom.weight_shape() {
                return Err(Error::InvalidModel("weight shape does not match layer".into()));
            }
            if b.len() != self.geom.bias_len() {
                return Err(Error::InvalidModel("bias length does not match layer".into()));
            }
            if w.scale() != self.s_w as f64 || b.scale() != self.bias_scale() {
                return Err(Error::InvalidModel("parameter scales disagree with layer".into()));
            }
        } else if self.geom.kind.has_params() {
            return Err(Error::InvalidModel("linear layer without parameters".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> LayerKind {
        self.geom.kind
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.geom.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.geom.out_shape
    }

    pub fn weights(&self) -> Option<&QTensor> {
        self.weights.as_ref()
    }

    pub fn bias(&self) -> Option<&QTensor> {
        self.bias.as_ref()
    }

    pub fn s_w(&self) -> f32 {
        self.s_w
    }

    pub fn s_x(&self) -> f32 {
        self.s_x
    }

    pub fn s_z(&self) -> f32 {
        self.s_z
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Scale of the 32-bit bias, `s_w · s_x` (exact in f64).
    pub fn bias_scale(&self) -> f64 {
        self.s_w as f64 * self.s_x as f64
    }

    /// `s_w · s_x / s_z`, the factor mapping the accumulator to `z̄`.
    pub fn requant_factor(&self) -> f64 {
        match self.geom.kind {
            LayerKind::GlobalAvgPool => {
                let hw = (self.geom.in_shape[1] * self.geom.in_shape[2]) as f64;
                self.s_x as f64 / (hw * self.s_z as f64)
            }
            _ => self.s_w as f64 * self.s_x as f64 / self.s_z as f64,
        }
    }

    /// Trainable parameter count (weights plus biases).
    pub fn d_w(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.len()) + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Output node count per sample.
    pub fn d_a(&self) -> usize {
        self.geom.out_len()
    }

    pub fn macs(&self) -> u64 {
        self.geom.macs()
    }

    pub fn has_params(&self) -> bool {
        self.weights.is_some()
    }

    /// Requantized pre-activation `z̄` for one sample. Inputs may lie slightly
    /// outside the 8-bit range (perturbed activations); the accumulator is
    /// exact and must fit in 32 bits.
    pub fn preactivation(&self, x: &[i32]) -> Result<Vec<i32>> {
        if x.len() != self.geom.in_len() {
            return Err(Error::ShapeMismatch {
                expected: self.geom.in_shape.clone(),
                got: vec![x.len()],
            });
        }
        let (lo, hi) = BitWidth::Int8.range(true);
        let factor = self.requant_factor();
        let mut acc = vec![0i64; self.geom.out_len()];
        match (&self.weights, &self.bias) {
            (Some(w), Some(b)) => {
                let w = w.data();
                self.geom.for_each_tap(|o, wi, ii| {
                    acc[o] += w[wi] as i64 * x[ii] as i64;
                });
                let b = b.data();
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += b[self.geom.bias_index(o)] as i64;
                }
            }
            _ => {
                let (c, hw) = (self.geom.in_shape[0], self.geom.in_shape[1] * self.geom.in_shape[2]);
                for ch in 0..c {
                    acc[ch] = x[ch * hw..(ch + 1) * hw].iter().map(|&v| v as i64).sum();
                }
            }
        }
        acc.iter()
            .map(|&a| {
                if a < i32::MIN as i64 || a > i32::MAX as i64 {
                    Err(Error::AccumulatorOverflow {
                        layer: 0,
                        value: a as i128,
                    })
                } else {
                    Ok(round_clip(a as f64 * factor, lo, hi) as i32)
                }
            })
            .collect()
    }

    /// Full layer output `h(z̄)` for one sample.
    pub fn forward_sample(&self, x: &[i32]) -> Result<Vec<i32>> {
        let mut z = self.preactivation(x)?;
        self.activation.apply(&mut z);
        Ok(z)
    }
}

/// Apply one layer to a quantized tensor holding either one sample (shape
/// equal to the layer input) or a batch (leading batch dimension).
pub fn q_layer_forward(layer: &LayerSpec, x: &QTensor) -> Result<QTensor> {
    if x.scale() != layer.s_x as f64 {
        return Err(Error::ScaleMismatch {
            expected: layer.s_x as f64,
            got: x.scale(),
        });
    }
    let in_shape = layer.in_shape();
    let in_len = layer.geometry().in_len();
    let flat_ok = matches!(layer.kind(), LayerKind::FullyConnected { .. });
    let (batch, batched) = if x.shape() == in_shape
        || (flat_ok && x.shape().len() == 1 && x.len() == in_len)
    {
        (1, false)
    } else if x.shape().len() >= 2
        && (x.shape()[1..] == *in_shape
            || (flat_ok && x.shape()[1..].iter().product::<usize>() == in_len))
    {
        (x.shape()[0], true)
    } else {
        return Err(Error::ShapeMismatch {
            expected: in_shape.to_vec(),
            got: x.shape().to_vec(),
        });
    };
    let mut out = Vec::with_capacity(batch * layer.d_a());
    for chunk in x.data().chunks(in_len).take(batch) {
        out.extend(layer.forward_sample(chunk)?);
    }
    let mut shape = layer.out_shape().to_vec();
    if batched {
        shape.insert(0, batch);
    }
    QTensor::from_raw(out, shape, layer.s_z as f64, BitWidth::Int8, true)
}

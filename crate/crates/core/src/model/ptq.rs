//! Post-training quantization with per-tensor symmetric scales.

use super::fp::FpModel;
use super::layer::{LayerKind, LayerSpec};
use super::QModel;
use crate::error::{Error, Result};
use crate::quant::{quantize, round_clip, BitWidth};

/// Scale used when a tensor is identically zero.
pub const SCALE_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

/// `max|x| / 127`, or [`SCALE_FLOOR`] for an all-zero tensor.
pub fn symmetric_scale<'a>(values: impl IntoIterator<Item = &'a f64>) -> f32 {
    let m = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        (m / 127.0) as f32
    } else {
        SCALE_FLOOR as f32
    }
}

/// Quantize a floating-point model, deriving activation scales from the
/// calibration samples (one flat input vector per sample).
pub fn ptq_calibrate(fp: &FpModel, calib: &[Vec<f64>]) -> Result<QModel> {
    if calib.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    if let Some(x) = calib.iter().find(|x| x.len() != fp.input_len()) {
        return Err(Error::ShapeMismatch {
            expected: fp.layers[0].geom.in_shape.clone(),
            got: vec![x.len()],
        });
    }
    let mut s_x = symmetric_scale(calib.iter().flatten());
    let mut acts: Vec<Vec<f64>> = calib.to_vec();
    let mut layers = Vec::with_capacity(fp.layers.len());
    for l in &fp.layers {
        acts = acts.iter().map(|a| l.forward(a)).collect();
        let s_z = symmetric_scale(acts.iter().flatten());
        let spec = match l.geom.kind {
            LayerKind::GlobalAvgPool => {
                LayerSpec::global_avg_pool(l.geom.in_shape.clone(), s_x, s_z)?
            }
            kind => {
                let s_w = symmetric_scale(&l.weight);
                let wshape = l.geom.weight_shape().unwrap();
                let w = quantize(&l.weight, &wshape, s_w as f64, BitWidth::Int8, true)?;
                let s_b = s_w as f64 * s_x as f64;
                let (lo, hi) = BitWidth::Int32.range(true);
                let b = l
                    .bias
                    .iter()
                    .map(|&v| round_clip(v / s_b, lo, hi) as i32)
                    .collect();
                LayerSpec::linear(
                    kind,
                    l.geom.in_shape.clone(),
                    w.data().to_vec(),
                    b,
                    s_w,
                    s_x,
                    s_z,
                    l.activation,
                )?
            }
        };
        layers.push(spec);
        s_x = s_z;
    }
    QModel::new(layers, fp.classes)
}

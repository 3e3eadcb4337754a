//! Fixed-point tensors and the scaled integer representation `x ≈ s · x̄`.
//!
//! All quantization is per-tensor symmetric (no zero point). Rounding is
//! round-to-nearest with ties away from zero, which is odd-symmetric:
//! `round(-v) == -round(v)`.

use crate::error::{Error, Result};

/// Supported integer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitWidth {
    Int8,
    Int32,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Int8 => 8,
            BitWidth::Int32 => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitWidth::Int8),
            32 => Ok(BitWidth::Int32),
            other => Err(Error::UnsupportedBitWidth(other)),
        }
    }

    /// Inclusive integer range `[-Q_N, Q_P]` for this width.
    pub fn range(self, signed: bool) -> (i64, i64) {
        let b = self.bits();
        if signed {
            (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1)
        } else {
            (0, (1i64 << b) - 1)
        }
    }
}

/// Round to nearest, ties away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `clip(round(v), lo, hi)` as an integer.
#[inline]
pub fn round_clip(v: f64, lo: i64, hi: i64) -> i64 {
    let r = round_half_away(v);
    if r <= lo as f64 {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as i64
    }
}

pub(crate) fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScale(scale))
    }
}

/// Integer tensor with a per-tensor floating-point scale.
///
/// Elements are stored as `i32` regardless of the logical bit-width. During
/// zeroth-order perturbation an 8-bit tensor may transiently hold values one
/// step outside its range; [`QTensor::validate`] checks the strict invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    data: Vec<i32>,
    shape: Vec<usize>,
    scale: f64,
    bits: BitWidth,
    signed: bool,
}

impl QTensor {
    /// Build a tensor from raw integers, checking every invariant.
    pub fn from_raw(
        data: Vec<i32>,
        shape: Vec<usize>,
        scale: f64,
        bits: BitWidth,
        signed: bool,
    ) -> Result<Self> {
        let t = QTensor {
            data,
            shape,
            scale,
            bits,
            signed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>, scale: f64, bits: BitWidth, signed: bool) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_raw(vec![0; n], shape, scale, bits, signed)
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self) -> (i64, i64) {
        self.bits.range(self.signed)
    }

    /// Check scale, shape/length agreement, and element range.
    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: vec![self.data.len()],
            });
        }
        let (lo, hi) = self.range();
        if let Some(i) = self
            .data
            .iter()
            .position(|&v| (v as i64) < lo || (v as i64) > hi)
        {
            return Err(Error::InvalidArgument(format!(
                "element {i} = {} outside [{lo}, {hi}]",
                self.data[i]
            )));
        }
        Ok(())
    }

    /// Same integers under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// `x̄_i = clip(round(x_i / s), -Q_N, Q_P)`.
pub fn quantize(
    x: &[f64],
    shape: &[usize],
    scale: f64,
    bits: BitWidth,
    signed: bool,
) -> Result<QTensor> {
    check_scale(scale)?;
    let n: usize = shape.iter().product();
    if n != x.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            got: vec![x.len()],
        });
    }
    let (lo, hi) = bits.range(signed);
    let mut data = Vec::with_capacity(x.len());
    for (index, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        data.push(round_clip(v / scale, lo, hi) as i32);
    }
    Ok(QTensor {
        data,
        shape: shape.to_vec(),
        scale,
        bits,
        signed,
    })
}

/// `x_i = s · x̄_i`.
pub fn dequantize(t: &QTensor) -> Vec<f64> {
    t.data.iter().map(|&v| t.scale * v as f64).collect()
}

//! Binary checkpoint format (little-endian).
//!
//! ```text
//! "QZOT" | version u16 | layer count u32 | classes u32 | blocks u32
//! per layer:
//!   kind u8 | kind params (u32 each) | activation u8 | block u32 (u32::MAX = none)
//!   trainable u8 | rank u32 | input dims u32... | s_w f32 | s_x f32 | s_z f32
//!   weight count u32 | weights i8... | bias count u32 | biases i32...
//! crc32 of all preceding bytes
//! ```

use std::path::Path;

use super::layer::{Activation, LayerKind, LayerSpec};
use super::QModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QZOT";
pub const VERSION: u16 = 1;
const NO_BLOCK: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &QModel) -> Result<Vec<u8>> {
    if model.layers().iter().any(|l| l.pending.is_some()) {
        return Err(Error::Checkpoint("model has an applied perturbation".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.num_layers());
    put_u32(&mut out, model.classes());
    put_u32(&mut out, model.num_blocks());
    for (i, l) in model.layers().iter().enumerate() {
        let kind = l.kind();
        out.push(kind.code());
        match kind {
            LayerKind::FullyConnected { out_features } => put_u32(&mut out, out_features),
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                for v in [out_channels, kernel.0, kernel.1, stride, padding] {
                    put_u32(&mut out, v);
                }
            }
            LayerKind::DepthwiseConv2d {
                kernel,
                stride,
                padding,
            } => {
                for v in [kernel.0, kernel.1, stride, padding] {
                    put_u32(&mut out, v);
                }
            }
            LayerKind::GlobalAvgPool => {}
        }
        out.push(l.activation().code());
        out.extend_from_slice(&model.block_of()[i].map_or(NO_BLOCK, |b| b as u32).to_le_bytes());
        out.push(model.is_trainable(i) as u8);
        put_u32(&mut out, l.in_shape().len());
        for &d in l.in_shape() {
            put_u32(&mut out, d);
        }
        for s in [l.s_w(), l.s_x(), l.s_z()] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let w = l.weights().map_or(&[][..], |t| t.data());
        put_u32(&mut out, w.len());
        out.extend(w.iter().map(|&v| v as i8 as u8));
        let b = l.bias().map_or(&[][..], |t| t.data());
        put_u32(&mut out, b.len());
        for &v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Count field bounded by the bytes left, so corrupt counts cannot
    /// trigger huge allocations.
    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        Ok(n)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<QModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a QZOT checkpoint)".into()));
    }
    if bytes.len() < 10 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (supported: {VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 6 };
    let n_layers = r.count(1)?;
    let classes = r.usize()?;
    let num_blocks = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut block_of = Vec::with_capacity(n_layers);
    let mut trainable = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = match r.u8()? {
            0 => LayerKind::FullyConnected {
                out_features: r.usize()?,
            },
            1 => LayerKind::Conv2d {
                out_channels: r.usize()?,
                kernel: (r.usize()?, r.usize()?),
                stride: r.usize()?,
                padding: r.usize()?,
            },
            2 => LayerKind::DepthwiseConv2d {
                kernel: (r.usize()?, r.usize()?),
                stride: r.usize()?,
                padding: r.usize()?,
            },
            3 => LayerKind::GlobalAvgPool,
            c => return Err(Error::Checkpoint(format!("unknown layer kind {c}"))),
        };
        let act = Activation::from_code(r.u8()?)?;
        let block = r.u32()?;
        block_of.push((block != NO_BLOCK).then_some(block as usize));
        trainable.push(r.u8()? != 0);
        let rank = r.count(4)?;
        let in_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let (s_w, s_x, s_z) = (r.f32()?, r.f32()?, r.f32()?);
        let nw = r.count(1)?;
        let w: Vec<i32> = r.take(nw)?.iter().map(|&b| b as i8 as i32).collect();
        let nb = r.count(4)?;
        let b = (0..nb)
            .map(|_| r.u32().map(|v| v as i32))
            .collect::<Result<Vec<_>>>()?;
        let layer = match kind {
            LayerKind::GlobalAvgPool => LayerSpec::global_avg_pool(in_shape, s_x, s_z)?,
            k => LayerSpec::linear(k, in_shape, w, b, s_w, s_x, s_z, act)?,
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last layer".into()));
    }
    let mut model = QModel::new(layers, classes)?;
    model.set_partition(block_of, num_blocks)?;
    model.set_trainable_mask(trainable)?;
    Ok(model)
}

pub fn checkpoint_save(model: &QModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<QModel> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

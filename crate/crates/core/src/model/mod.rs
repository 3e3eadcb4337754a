//! Quantized model container, batches, forward evaluation and persistence.

pub mod checkpoint;
pub mod fp;
mod layer;
mod partition;
pub mod ptq;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint};
pub use fp::{FpBatch, FpLayer, FpModel};
pub use layer::{q_layer_forward, Activation, Geometry, LayerKind, LayerSpec};
pub use partition::partition_blocks;
pub use ptq::ptq_calibrate;

use crate::error::{Error, Result};
use crate::quant::{quantize, BitWidth, QTensor};

/// An ordered stack of real-quantized layers with a block partition over its
/// trainable layers.
#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    layers: Vec<LayerSpec>,
    classes: usize,
    block_of: Vec<Option<usize>>,
    num_blocks: usize,
    trainable: Vec<bool>,
}

impl QModel {
    /// Validates the shape and scale chain. All parameterized layers start in
    /// a single block and are trainable.
    pub fn new(layers: Vec<LayerSpec>, classes: usize) -> Result<Self> {
        let block_of = layers
            .iter()
            .map(|l| l.has_params().then_some(0))
            .collect();
        let trainable = layers.iter().map(|l| l.has_params()).collect();
        let model = Self {
            layers,
            classes,
            block_of,
            num_blocks: 1,
            trainable,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if !self.layers.iter().any(|l| l.has_params()) {
            return Err(Error::InvalidModel("model has no parameterized layer".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            let flat = matches!(b.kind(), LayerKind::FullyConnected { .. });
            let shapes_ok = if flat {
                b.geometry().in_len() == a.geometry().out_len()
            } else {
                b.in_shape() == a.out_shape()
            };
            if !shapes_ok {
                return Err(Error::InvalidModel(format!(
                    "layer {} output {:?} does not feed layer {} input {:?}",
                    i,
                    a.out_shape(),
                    i + 1,
                    b.in_shape()
                )));
            }
            if a.s_z().to_bits() != b.s_x().to_bits() {
                return Err(Error::InvalidModel(format!(
                    "scale chain broken between layers {i} and {}: s_z={} s_x={}",
                    i + 1,
                    a.s_z(),
                    b.s_x()
                )));
            }
        }
        let last = self.layers.last().unwrap();
        if last.geometry().out_len() != self.classes || self.classes == 0 {
            return Err(Error::InvalidModel(format!(
                "final layer has {} outputs for {} classes",
                last.geometry().out_len(),
                self.classes
            )));
        }
        self.validate_blocks(&self.block_of, self.num_blocks)
    }

    fn validate_blocks(&self, block_of: &[Option<usize>], k: usize) -> Result<()> {
        if block_of.len() != self.layers.len() || k == 0 {
            return Err(Error::InvalidModel("block assignment length mismatch".into()));
        }
        let mut last = 0;
        let mut seen = vec![false; k];
        for (l, b) in self.layers.iter().zip(block_of) {
            match (l.has_params(), b) {
                (true, Some(b)) => {
                    if *b >= k || *b < last {
                        return Err(Error::InvalidModel(
                            "blocks must be contiguous and ordered".into(),
                        ));
                    }
                    if *b > last + 1 || (*b == last + 1 && !seen[last]) {
                        return Err(Error::InvalidModel("block ids must not skip".into()));
                    }
                    last = *b;
                    seen[*b] = true;
                }
                (false, None) => {}
                _ => {
                    return Err(Error::InvalidModel(
                        "exactly the parameterized layers must belong to a block".into(),
                    ))
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidModel("every block must own a layer".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerSpec {
        &mut self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.layers[0].in_shape()
    }

    pub fn input_scale(&self) -> f64 {
        self.layers[0].s_x() as f64
    }

    pub fn block_of(&self) -> &[Option<usize>] {
        &self.block_of
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Replace the block partition. Trainable scope resets to all layers.
    pub fn set_partition(&mut self, block_of: Vec<Option<usize>>, k: usize) -> Result<()> {
        self.validate_blocks(&block_of, k)?;
        self.block_of = block_of;
        self.num_blocks = k;
        self.set_all_trainable();
        Ok(())
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn trainable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.trainable[i]).collect()
    }

    /// Total trainable parameter count.
    pub fn trainable_params(&self) -> usize {
        self.trainable_layers().iter().map(|&i| self.layers[i].d_w()).sum()
    }

    pub fn set_all_trainable(&mut self) {
        self.trainable = self.layers.iter().map(|l| l.has_params()).collect();
    }

    /// Restrict training to the layers of one block.
    pub fn set_trainable(&mut self, block: usize) -> Result<()> {
        if block >= self.num_blocks {
            return Err(Error::InvalidBlock {
                block,
                blocks: self.num_blocks,
            });
        }
        let mask: Vec<bool> = self
            .block_of
            .iter()
            .zip(&self.layers)
            .map(|(b, l)| *b == Some(block) && l.d_w() > 0)
            .collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(format!(
                "block {block} has no trainable parameters"
            )));
        }
        self.trainable = mask;
        Ok(())
    }

    pub(crate) fn set_trainable_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.layers.len()
            || mask.iter().zip(&self.layers).any(|(&m, l)| m && !l.has_params())
        {
            return Err(Error::InvalidModel("invalid trainable mask".into()));
        }
        self.trainable = mask;
        Ok(())
    }

    /// Forward MACs of layers `start..` for one sample.
    pub fn macs_from(&self, start: usize) -> u64 {
        self.layers[start..].iter().map(|l| l.macs()).sum()
    }

    /// Integer output of the last layer given the input of layer `start`.
    pub fn forward_from(&self, start: usize, x: &[i32]) -> Result<Vec<i32>> {
        let mut a = x.to_vec();
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            a = l.forward_sample(&a).map_err(|e| at_layer(e, i))?;
        }
        Ok(a)
    }

    /// Cross-entropy of one sample from the final integer output.
    pub fn sample_loss(&self, out: &[i32], label: usize) -> Result<f64> {
        if label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(cross_entropy(&self.logits(out), label))
    }

    /// Dequantized logits `s_z · z̄` of the final layer.
    pub fn logits(&self, out: &[i32]) -> Vec<f64> {
        let s = self.layers.last().unwrap().s_z() as f64;
        out.iter().map(|&v| s * v as f64).collect()
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.sample_len() != self.layers[0].geometry().in_len() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_vec(),
                got: batch.sample_shape().to_vec(),
            });
        }
        if batch.inputs.scale() != self.input_scale() {
            return Err(Error::ScaleMismatch {
                expected: self.input_scale(),
                got: batch.inputs.scale(),
            });
        }
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Logits and per-sample losses for a batch.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let mut logits = Vec::with_capacity(batch.len() * self.classes);
        let mut losses = Vec::with_capacity(batch.len());
        for (n, &label) in batch.labels.iter().enumerate() {
            let out = self.forward_from(0, batch.sample(n))?;
            let l = self.logits(&out);
            losses.push(cross_entropy(&l, label));
            logits.extend(l);
        }
        Ok(ForwardOutput {
            logits,
            classes: self.classes,
            losses,
        })
    }

    /// Top-1 accuracy (ties resolve to the lowest class index).
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let out = self.forward(batch)?;
        let correct = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(n, &y)| argmax(out.sample_logits(*n)) == y)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

pub(crate) fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::AccumulatorOverflow { value, .. } => Error::AccumulatorOverflow { layer, value },
        other => other,
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy, computed with a max shift.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Row-major `N × C`.
    pub logits: Vec<f64>,
    pub classes: usize,
    pub losses: Vec<f64>,
}

impl ForwardOutput {
    pub fn sample_logits(&self, n: usize) -> &[f64] {
        &self.logits[n * self.classes..(n + 1) * self.classes]
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Quantized inputs `[N, ...]` (signed 8-bit) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: QTensor,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: QTensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if inputs.bits() != BitWidth::Int8 || !inputs.signed() {
            return Err(Error::InvalidArgument("batch inputs must be signed 8-bit".into()));
        }
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len()],
                got: inputs.shape().to_vec(),
            });
        }
        Ok(Self { inputs, labels })
    }

    /// Quantize row-major float features at the model input scale.
    pub fn from_features(
        features: &[f64],
        sample_shape: &[usize],
        labels: &[usize],
        scale: f64,
    ) -> Result<Self> {
        let mut shape = vec![labels.len()];
        shape.extend_from_slice(sample_shape);
        let inputs = quantize(features, &shape, scale, BitWidth::Int8, true)?;
        Self::new(inputs, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &QTensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, n: usize) -> &[i32] {
        let k = self.sample_len();
        &self.inputs.data()[n * k..(n + 1) * k]
    }

    /// Contiguous sub-batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Batch> {
        self.select(&(start..end).collect::<Vec<_>>())
    }

    /// Sub-batch of the given sample indices, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let inputs = QTensor::from_raw(data, shape, self.inputs.scale(), BitWidth::Int8, true)?;
        Ok(Batch { inputs, labels })
    }
}

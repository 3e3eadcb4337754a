//! Floating-point model description: the input to post-training quantization
//! and the dequantized mirror used by the gradient oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{Activation, Geometry, LayerKind};
use super::{cross_entropy, Batch, QModel};
use crate::error::{Error, Result};
use crate::quant::dequantize;

#[derive(Debug, Clone, PartialEq)]
pub struct FpLayer {
    pub geom: Geometry,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl FpLayer {
    pub fn new(
        kind: LayerKind,
        in_shape: Vec<usize>,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let geom = Geometry::new(kind, in_shape)?;
        let wlen = geom.weight_shape().map_or(0, |s| s.iter().product());
        if weight.len() != wlen || bias.len() != geom.bias_len() {
            return Err(Error::InvalidModel(format!(
                "{} layer expects {} weights and {} biases",
                kind.name(),
                wlen,
                geom.bias_len()
            )));
        }
        Ok(Self {
            geom,
            weight,
            bias,
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.geom.out_len()];
        match self.geom.kind {
            LayerKind::GlobalAvgPool => {
                let hw = self.geom.in_shape[1] * self.geom.in_shape[2];
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = x[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
                }
            }
            _ => {
                let w = &self.weight;
                self.geom.for_each_tap(|o, wi, ii| z[o] += w[wi] * x[ii]);
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += self.bias[self.geom.bias_index(o)];
                }
            }
        }
        z
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.preactivation(x);
        self.activation.apply_f64(&mut z);
        z
    }
}

/// Floating-point batch: one input vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FpBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FpBatch {
    /// Dequantized copy of a quantized batch.
    pub fn from_batch(batch: &Batch) -> Self {
        let s = batch.inputs().scale();
        Self {
            inputs: (0..batch.len())
                .map(|n| batch.sample(n).iter().map(|&v| s * v as f64).collect())
                .collect(),
            labels: batch.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpModel {
    pub layers: Vec<FpLayer>,
    pub classes: usize,
}

impl FpModel {
    pub fn new(layers: Vec<FpLayer>, classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].geom.out_len() != w[1].geom.in_len() {
                return Err(Error::InvalidModel(format!(
                    "layer {i} output does not feed layer {}",
                    i + 1
                )));
            }
        }
        if layers.last().unwrap().geom.out_len() != classes {
            return Err(Error::InvalidModel("final layer width must equal class count".into()));
        }
        Ok(Self { layers, classes })
    }

    /// Randomly initialized model (He-uniform weights, zero biases).
    pub fn random(
        input_shape: &[usize],
        stack: &[(LayerKind, Activation)],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(stack.len());
        for &(kind, act) in stack {
            let geom = Geometry::new(kind, shape.clone())?;
            let (weight, bias) = match geom.weight_shape() {
                Some(ws) => {
                    let fan_in: usize = ws[1..].iter().product();
                    let a = (6.0 / fan_in as f64).sqrt();
                    let n: usize = ws.iter().product();
                    (
                        (0..n).map(|_| rng.random_range(-a..a)).collect(),
                        vec![0.0; geom.bias_len()],
                    )
                }
                None => (vec![], vec![]),
            };
            shape = geom.out_shape.clone();
            layers.push(FpLayer::new(kind, geom.in_shape, weight, bias, act)?);
        }
        let classes = shape.iter().product();
        Self::new(layers, classes)
    }

    /// Dequantized mirror of a quantized model.
    pub fn from_qmodel(q: &QModel) -> Self {
        let layers = q
            .layers()
            .iter()
            .map(|l| FpLayer {
                geom: l.geometry().clone(),
                weight: l.weights().map(dequantize).unwrap_or_default(),
                bias: l.bias().map(dequantize).unwrap_or_default(),
                activation: l.activation(),
            })
            .collect();
        Self {
            layers,
            classes: q.classes(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].geom.in_len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |a, l| l.forward(&a))
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &FpBatch) -> f64 {
        batch
            .inputs
            .iter()
            .zip(&batch.labels)
            .map(|(x, &y)| cross_entropy(&self.logits(x), y))
            .sum::<f64>()
            / batch.len() as f64
    }
}

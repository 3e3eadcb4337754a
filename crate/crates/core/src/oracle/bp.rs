use crate::error::{Error, Result};
use crate::model::fp::{FpBatch, FpModel};
use crate::model::LayerKind;

/// Per-layer gradient of the mean loss (empty for pooling layers).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FpGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FpGrad {
    pub fn flatten(&self) -> Vec<f64> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Reverse-mode gradient of the mean cross-entropy:
/// `∇_W = ∇_z · aᵀ`, `∇_a = Wᵀ · ∇_z`, `∇_z = ∇_h ⊙ h'(z)`.
pub fn bp_grad_fp(model: &FpModel, batch: &FpBatch) -> Result<Vec<FpGrad>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads: Vec<FpGrad> = model
        .layers
        .iter()
        .map(|l| FpGrad {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        })
        .collect();
    let inv_n = 1.0 / batch.len() as f64;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        if y >= model.classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: model.classes,
            });
        }
        let mut inputs = Vec::with_capacity(model.layers.len());
        let mut pre = Vec::with_capacity(model.layers.len());
        let mut a = x.clone();
        for l in &model.layers {
            let z = l.preactivation(&a);
            inputs.push(a);
            a = z.clone();
            l.activation.apply_f64(&mut a);
            pre.push(z);
        }
        let mut g = softmax(&a);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_n);
        for (i, l) in model.layers.iter().enumerate().rev() {
            let gz: Vec<f64> = match l.activation {
                crate::model::Activation::Relu => g
                    .iter()
                    .zip(&pre[i])
                    .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect(),
                crate::model::Activation::Identity => g,
            };
            let x = &inputs[i];
            let mut gx = vec![0.0; x.len()];
            match l.geom.kind {
                LayerKind::GlobalAvgPool => {
                    let hw = l.geom.in_shape[1] * l.geom.in_shape[2];
                    for (c, &d) in gz.iter().enumerate() {
                        gx[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = d / hw as f64);
                    }
                }
                _ => {
                    let gw = &mut grads[i].weight;
                    let w = &l.weight;
                    l.geom.for_each_tap(|o, wi, ii| {
                        gw[wi] += gz[o] * x[ii];
                        gx[ii] += w[wi] * gz[o];
                    });
                    for (o, &d) in gz.iter().enumerate() {
                        grads[i].bias[l.geom.bias_index(o)] += d;
                    }
                }
            }
            g = gx;
        }
    }
    Ok(grads)
}

/// Central differences of a scalar function.
pub fn finite_diff(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..t.len())
        .map(|i| {
            let v = t[i];
            t[i] = v + h;
            let up = f(&t);
            t[i] = v - h;
            let down = f(&t);
            t[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn param(m: &mut FpModel, layer: usize, bias: bool, j: usize) -> &mut f64 {
    if bias {
        &mut m.layers[layer].bias[j]
    } else {
        &mut m.layers[layer].weight[j]
    }
}

/// Central differences of the mean loss with respect to every parameter.
pub fn finite_diff_grad(model: &FpModel, batch: &FpBatch, h: f64) -> Vec<FpGrad> {
    let mut m = model.clone();
    let mut out = Vec::with_capacity(model.layers.len());
    for i in 0..model.layers.len() {
        let mut g = FpGrad::default();
        for bias in [false, true] {
            let len = if bias { m.layers[i].bias.len() } else { m.layers[i].weight.len() };
            let mut col = Vec::with_capacity(len);
            for j in 0..len {
                let v = *param(&mut m, i, bias, j);
                *param(&mut m, i, bias, j) = v + h;
                let up = m.loss(batch);
                *param(&mut m, i, bias, j) = v - h;
                let down = m.loss(batch);
                *param(&mut m, i, bias, j) = v;
                col.push((up - down) / (2.0 * h));
            }
            if bias {
                g.bias = col;
            } else {
                g.weight = col;
            }
        }
        out.push(g);
    }
    out
}

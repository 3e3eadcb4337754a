//! Floating-point reference implementations used for validation: analytic
//! backpropagation, central differences, cosine similarity and Monte-Carlo
//! variance reports for the randomized gradient estimator.

mod bp;
mod variance;

pub use bp::{bp_grad_fp, finite_diff, finite_diff_grad, FpGrad};
pub use variance::{rge, variance_report, Sampling, VarianceReport, VarianceSetup};

use crate::error::{Error, Result};
use crate::model::QModel;
use crate::zo::LayerGrad;

/// `⟨g,h⟩ / (‖g‖‖h‖)`, defined as 0 when either vector is zero.
pub fn cosine_similarity(g: &[f64], h: &[f64]) -> Result<f64> {
    if g.len() != h.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![g.len()],
            got: vec![h.len()],
        });
    }
    let dot: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
    let ng = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nh = h.iter().map(|a| a * a).sum::<f64>().sqrt();
    if ng == 0.0 || nh == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (ng * nh)).clamp(-1.0, 1.0))
}

/// A floating-point gradient in the units of the quantized estimates:
/// `∂ℓ/∂θ̄ = s · ∂ℓ/∂θ`, with `s_W` for weights and `s_W s_x` for biases,
/// flattened as weights then biases.
pub fn to_quantized_units(model: &QModel, layer: usize, g: &FpGrad) -> Vec<f64> {
    let l = model.layer(layer);
    let (sw, sb) = (l.s_w() as f64, l.bias_scale());
    g.weight
        .iter()
        .map(|v| v * sw)
        .chain(g.bias.iter().map(|v| v * sb))
        .collect()
}

/// Cosine similarity of a quantized estimate with a reference gradient of
/// the dequantized mirror, compared in quantized units.
pub fn estimate_similarity(model: &QModel, g: &LayerGrad, reference: &[FpGrad]) -> Result<f64> {
    let est: Vec<f64> = g.iter().copied().collect();
    cosine_similarity(&est, &to_quantized_units(model, g.layer, &reference[g.layer]))
}

/// CSV of per-layer similarities: `layer,method,cosine`.
pub fn similarity_csv(rows: &[(usize, String, f64)]) -> String {
    let mut s = String::from("layer,method,cosine\n");
    for (l, m, c) in rows {
        s += &format!("{l},{m},{c:.6}\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}

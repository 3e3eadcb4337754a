//! Quantized zeroth-order gradient estimation and the single-pass training
//! step.
//!
//! All perturbations are Rademacher streams replayed from seeds derived by
//! [`derive_seed`](crate::prng::derive_seed) from `(base, layer, query, sample)`.
//! Weight perturbation (WP) streams cover a layer's weights followed by its
//! biases; node perturbation (NP) streams cover the layer's pre-activations.

mod estimate;
mod perturb;
mod step;

pub use estimate::{estimate_grad_np, estimate_grad_wp, Scope};
pub use perturb::{perturb_weights_inplace, Direction};
pub use step::{apply_grads, estimate_step, train_step, StepReport};

use crate::error::{Error, Result};
use crate::model::LayerSpec;
use crate::prng::{MAX_LAYER, MAX_QUERY, MAX_SAMPLE};

/// Which estimator a training step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbMode {
    /// One WP estimate over every trainable parameter.
    ModelWp,
    /// WP per layer.
    LayerWp,
    /// NP per layer.
    LayerNp,
    /// Per layer, WP when `d_w < d_a`, otherwise NP.
    Adaptive,
}

impl PerturbMode {
    pub fn name(self) -> &'static str {
        match self {
            PerturbMode::ModelWp => "model-wp",
            PerturbMode::LayerWp => "layer-wp",
            PerturbMode::LayerNp => "layer-np",
            PerturbMode::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "model-wp" => Ok(PerturbMode::ModelWp),
            "layer-wp" => Ok(PerturbMode::LayerWp),
            "layer-np" => Ok(PerturbMode::LayerNp),
            "adaptive" => Ok(PerturbMode::Adaptive),
            _ => Err(Error::InvalidArgument(format!(
                "unknown perturbation mode {s:?} (model-wp, layer-wp, layer-np, adaptive)"
            ))),
        }
    }

    pub fn is_layerwise(self) -> bool {
        self != PerturbMode::ModelWp
    }
}

/// Perturbation of a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Wp,
    Np,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Wp => "wp",
            Mode::Np => "np",
        }
    }
}

/// WP iff `d_w < d_a`; ties go to NP.
pub fn choose_mode(layer: &LayerSpec) -> Mode {
    if layer.d_w() < layer.d_a() {
        Mode::Wp
    } else {
        Mode::Np
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    /// Query budget. Layer-wise modes give each trainable layer
    /// `max(1, q / L_trainable)` queries.
    pub q: usize,
    pub mu: i32,
    pub base_seed: u32,
    /// One WP direction per query for the whole batch (otherwise per sample).
    pub share_wp_across_batch: bool,
    /// Independent NP directions per sample (otherwise shared per query).
    pub per_sample_np: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            mode: PerturbMode::Adaptive,
            q: 1,
            mu: 1,
            base_seed: 1,
            share_wp_across_batch: true,
            per_sample_np: true,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q > MAX_QUERY + 1 {
            return Err(Error::InvalidArgument(format!(
                "query budget must lie in 1..={}",
                MAX_QUERY + 1
            )));
        }
        if self.mu < 1 {
            return Err(Error::InvalidArgument("mu must be a positive integer".into()));
        }
        if self.base_seed == 0 {
            return Err(Error::ZeroSeed);
        }
        Ok(())
    }

    /// Queries per layer under this mode for `trainable` trainable layers.
    pub fn queries_per_layer(&self, trainable: usize) -> usize {
        if self.mode.is_layerwise() {
            (self.q / trainable.max(1)).max(1)
        } else {
            self.q
        }
    }
}

pub(crate) fn check_indices(layers: usize, samples: usize, q: usize) -> Result<()> {
    if layers > MAX_LAYER + 1 || samples > MAX_SAMPLE + 1 || q > MAX_QUERY + 1 {
        return Err(Error::InvalidArgument(format!(
            "seed derivation supports at most {} layers, {} samples and {} queries",
            MAX_LAYER + 1,
            MAX_SAMPLE + 1,
            MAX_QUERY + 1
        )));
    }
    Ok(())
}

/// Gradient estimate for one layer, in integer-parameter units.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub layer: usize,
    pub mode: Mode,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Samples, queries and dimension entering gradient-norm scaling.
    pub n: usize,
    pub q: usize,
    pub d: usize,
}

impl LayerGrad {
    pub fn zeros(layer: usize, spec: &LayerSpec, mode: Mode, n: usize, q: usize, d: usize) -> Self {
        Self {
            layer,
            mode,
            weight: vec![0.0; spec.weights().map_or(0, |w| w.len())],
            bias: vec![0.0; spec.bias().map_or(0, |b| b.len())],
            n,
            q,
            d,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub(crate) fn add_scaled(&mut self, coef: f64, xi: &[i8]) {
        let (xw, xb) = xi.split_at(self.weight.len());
        for (g, &x) in self.weight.iter_mut().zip(xw) {
            *g += coef * x as f64;
        }
        for (g, &x) in self.bias.iter_mut().zip(xb) {
            *g += coef * x as f64;
        }
    }
}

/// Per-layer estimates from one estimation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub layers: Vec<LayerGrad>,
    /// Dimension used for gradient-norm scaling.
    pub d: usize,
    /// Seeds of the first sample of every query, per layer, in order.
    pub seeds: Vec<u32>,
    /// Sample-level forward evaluations (clean and perturbed).
    pub forwards: u64,
    pub macs: u64,
}

impl GradEstimate {
    pub fn layer(&self, i: usize) -> Option<&LayerGrad> {
        self.layers.iter().find(|g| g.layer == i)
    }

    /// All entries concatenated in layer order (weights then biases).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|g| g.iter().copied()).collect()
    }
}

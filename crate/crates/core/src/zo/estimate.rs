use super::perturb::{perturb_weights_inplace, Direction};
use super::{check_indices, GradEstimate, LayerGrad, Mode, PerturbConfig};
use crate::error::{Error, Result};
use crate::model::{at_layer, Batch, QModel};
use crate::prng::{derive_seed, rademacher_fill};

/// Parameters covered by one WP estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Every trainable layer, perturbed jointly.
    All,
    Layer(usize),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Cost {
    pub forwards: u64,
    pub macs: u64,
}

/// Per-sample activations entering layer `start` and the clean losses.
pub(crate) struct Cache<'a> {
    pub start: usize,
    pub acts: &'a [Vec<i32>],
    pub clean: &'a [f64],
    pub labels: &'a [usize],
}

fn loss_from(model: &QModel, start: usize, x: &[i32], label: usize, cost: &mut Cost) -> Result<f64> {
    cost.forwards += 1;
    cost.macs += model.macs_from(start);
    let out = model.forward_from(start, x)?;
    model.sample_loss(&out, label)
}

/// Clean losses of every sample (one full forward each).
pub(crate) fn clean_losses(model: &QModel, batch: &Batch, cost: &mut Cost) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|n| loss_from(model, 0, batch.sample(n), batch.labels()[n], cost))
        .collect()
}

/// Apply the perturbations, run `f`, then remove them again even if `f`
/// failed.
fn with_perturbation<T>(
    model: &mut QModel,
    layers: &[usize],
    seeds: &[u32],
    mu: i32,
    f: impl FnOnce(&QModel) -> Result<T>,
) -> Result<T> {
    let mut applied = 0;
    let mut status = Ok(());
    for (&l, &s) in layers.iter().zip(seeds) {
        if let Err(e) = perturb_weights_inplace(model.layer_mut(l), s, mu, Direction::Apply) {
            status = Err(at_layer(e, l));
            break;
        }
        applied += 1;
    }
    let out = status.and_then(|_| f(model));
    for (&l, &s) in layers[..applied].iter().zip(seeds).rev() {
        perturb_weights_inplace(model.layer_mut(l), s, mu, Direction::Remove)?;
    }
    out
}

/// WP estimate over `layers` jointly, accumulated q-major then n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn wp_core(
    model: &mut QModel,
    layers: &[usize],
    cache: &Cache,
    q: usize,
    d: usize,
    cfg: &PerturbConfig,
    cost: &mut Cost,
    seeds_out: &mut Vec<u32>,
) -> Result<Vec<LayerGrad>> {
    let n = cache.acts.len();
    let mut grads: Vec<LayerGrad> = layers
        .iter()
        .map(|&l| LayerGrad::zeros(l, model.layer(l), Mode::Wp, n, q, d))
        .collect();
    let mu = cfg.mu as f64;
    let norm = (n * q) as f64;
    let base = cfg.base_seed;
    for qi in 0..q {
        if cfg.share_wp_across_batch {
            let seeds: Vec<u32> = layers.iter().map(|&l| derive_seed(base, l, qi, 0)).collect();
            seeds_out.extend(&seeds);
            let diff = with_perturbation(model, layers, &seeds, cfg.mu, |m| {
                let mut s = 0.0;
                for k in 0..n {
                    let l = loss_from(m, cache.start, &cache.acts[k], cache.labels[k], cost)?;
                    s += l - cache.clean[k];
                }
                Ok(s)
            })?;
            let coef = diff / mu / norm;
            for (g, &s) in grads.iter_mut().zip(&seeds) {
                g.add_scaled(coef, &rademacher_fill(s, g.weight.len() + g.bias.len())?);
            }
        } else {
            for k in 0..n {
                let seeds: Vec<u32> = layers.iter().map(|&l| derive_seed(base, l, qi, k)).collect();
                if k == 0 {
                    seeds_out.extend(&seeds);
                }
                let l = with_perturbation(model, layers, &seeds, cfg.mu, |m| {
                    loss_from(m, cache.start, &cache.acts[k], cache.labels[k], cost)
                })?;
                let coef = (l - cache.clean[k]) / mu / norm;
                for (g, &s) in grads.iter_mut().zip(&seeds) {
                    g.add_scaled(coef, &rademacher_fill(s, g.weight.len() + g.bias.len())?);
                }
            }
        }
    }
    Ok(grads)
}

/// NP estimate for layer `cache.start`, given its clean pre-activations.
pub(crate) fn np_core(
    model: &QModel,
    z: &[Vec<i32>],
    cache: &Cache,
    q: usize,
    cfg: &PerturbConfig,
    cost: &mut Cost,
    seeds_out: &mut Vec<u32>,
) -> Result<LayerGrad> {
    let i = cache.start;
    let layer = model.layer(i);
    if !layer.has_params() {
        return Err(Error::NoPreActivation(i));
    }
    let n = z.len();
    let d_a = layer.d_a();
    let mu = cfg.mu as f64;
    let norm = (n * q) as f64;
    let mut gz = vec![vec![0.0f64; d_a]; n];
    let mut zp = vec![0i32; d_a];
    for qi in 0..q {
        for k in 0..n {
            let seed = derive_seed(cfg.base_seed, i, qi, if cfg.per_sample_np { k } else { 0 });
            if k == 0 {
                seeds_out.push(seed);
            }
            let xi = rademacher_fill(seed, d_a)?;
            for ((p, &v), &x) in zp.iter_mut().zip(&z[k]).zip(&xi) {
                *p = v + cfg.mu * x as i32;
            }
            layer.activation().apply(&mut zp);
            let l = loss_from(model, i + 1, &zp, cache.labels[k], cost)?;
            let coef = (l - cache.clean[k]) / mu / norm;
            for (g, &x) in gz[k].iter_mut().zip(&xi) {
                *g += coef * x as f64;
            }
        }
    }
    let mut grad = LayerGrad::zeros(i, layer, Mode::Np, n, q, d_a);
    node_to_weight_grad(model, i, &gz, cache.acts, &mut grad);
    Ok(grad)
}

/// `∇W̄ = κ Σ_n ĝz_n ā_nᵀ`, `∇b̄ = κ Σ_n ĝz_n`, with `κ = s_W s_x / s_z`.
pub(crate) fn node_to_weight_grad(
    model: &QModel,
    i: usize,
    gz: &[Vec<f64>],
    acts: &[Vec<i32>],
    grad: &mut LayerGrad,
) {
    let layer = model.layer(i);
    let kappa = layer.requant_factor();
    let geom = layer.geometry();
    for (g, a) in gz.iter().zip(acts) {
        let w = &mut grad.weight;
        geom.for_each_tap(|o, wi, ii| w[wi] += kappa * g[o] * a[ii] as f64);
        for (o, &v) in g.iter().enumerate() {
            grad.bias[geom.bias_index(o)] += kappa * v;
        }
    }
}

/// Integer activations entering layer `upto` for every sample.
pub(crate) fn propagate(model: &QModel, batch: &Batch, upto: usize, cost: &mut Cost) -> Result<Vec<Vec<i32>>> {
    let mut acts: Vec<Vec<i32>> = (0..batch.len()).map(|n| batch.sample(n).to_vec()).collect();
    for i in 0..upto {
        cost.macs += model.layer(i).macs() * batch.len() as u64;
        for a in acts.iter_mut() {
            *a = model.layer(i).forward_sample(a).map_err(|e| at_layer(e, i))?;
        }
    }
    Ok(acts)
}

fn check(model: &QModel, batch: &Batch, q: usize, cfg: &PerturbConfig) -> Result<()> {
    cfg.validate()?;
    if q == 0 {
        return Err(Error::InvalidArgument("query budget must be at least 1".into()));
    }
    model.check_batch(batch)?;
    check_indices(model.num_layers(), batch.len(), q)
}

/// Quantized randomized gradient estimate by weight perturbation:
///
/// `ĝ = 1/(NQ) Σ_q Σ_n (ℓ(θ̄ + μξ_q; x_n) − ℓ(θ̄; x_n)) / μ · ξ_q`
///
/// with `ξ` shared across the batch unless `share_wp_across_batch` is off.
/// The model is restored bit-exactly before returning.
pub fn estimate_grad_wp(
    model: &mut QModel,
    scope: Scope,
    batch: &Batch,
    q: usize,
    cfg: &PerturbConfig,
) -> Result<GradEstimate> {
    check(model, batch, q, cfg)?;
    let layers = match scope {
        Scope::All => model.trainable_layers(),
        Scope::Layer(i) => {
            if i >= model.num_layers() || !model.layer(i).has_params() {
                return Err(Error::InvalidArgument(format!("layer {i} has no parameters")));
            }
            vec![i]
        }
    };
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no trainable layers in scope".into()));
    }
    let mut cost = Cost::default();
    let clean = clean_losses(model, batch, &mut cost)?;
    let start = layers[0];
    let acts = propagate(model, batch, start, &mut cost)?;
    let d = layers.iter().map(|&l| model.layer(l).d_w()).sum();
    let cache = Cache {
        start,
        acts: &acts,
        clean: &clean,
        labels: batch.labels(),
    };
    let mut seeds = Vec::new();
    let grads = wp_core(model, &layers, &cache, q, d, cfg, &mut cost, &mut seeds)?;
    Ok(GradEstimate {
        layers: grads,
        d,
        seeds,
        forwards: cost.forwards,
        macs: cost.macs,
    })
}

/// Node-perturbation estimate for layer `i`: perturb `z̄⁽ⁱ⁾` per sample,
/// re-run the suffix, then convert the node gradient to weight and bias
/// gradients.
pub fn estimate_grad_np(
    model: &QModel,
    i: usize,
    batch: &Batch,
    q: usize,
    cfg: &PerturbConfig,
) -> Result<GradEstimate> {
    check(model, batch, q, cfg)?;
    if i >= model.num_layers() || !model.layer(i).has_params() {
        return Err(Error::NoPreActivation(i));
    }
    let mut cost = Cost::default();
    let clean = clean_losses(model, batch, &mut cost)?;
    let acts = propagate(model, batch, i, &mut cost)?;
    cost.macs += model.layer(i).macs() * batch.len() as u64;
    let z = acts
        .iter()
        .map(|a| model.layer(i).preactivation(a).map_err(|e| at_layer(e, i)))
        .collect::<Result<Vec<_>>>()?;
    let cache = Cache {
        start: i,
        acts: &acts,
        clean: &clean,
        labels: batch.labels(),
    };
    let mut seeds = Vec::new();
    let g = np_core(model, &z, &cache, q, cfg, &mut cost, &mut seeds)?;
    Ok(GradEstimate {
        d: g.d,
        layers: vec![g],
        seeds,
        forwards: cost.forwards,
        macs: cost.macs,
    })
}

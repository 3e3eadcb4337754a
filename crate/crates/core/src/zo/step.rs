use std::time::Instant;

use super::estimate::{clean_losses, np_core, propagate, wp_core, Cache, Cost};
use super::{check_indices, choose_mode, LayerGrad, Mode, PerturbConfig, PerturbMode};
use crate::error::{Error, Result};
use crate::model::{at_layer, Batch, QModel};
use crate::optim::{apply_step_inplace, step_size, Scaling};

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    /// Mean clean loss of the batch at the pre-step parameters.
    pub loss: f64,
    pub modes: Vec<(usize, Mode)>,
    pub base_seed: u32,
    pub queries_per_layer: usize,
    /// Sample-level forward evaluations, clean and perturbed.
    pub forwards: u64,
    pub macs: u64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepReport {
    /// Per-layer modes, e.g. `0:wp 2:np`.
    pub fn mode_string(&self) -> String {
        self.modes
            .iter()
            .map(|(i, m)| format!("{i}:{}", m.name()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub const CSV_HEADER: &'static str = "iteration,loss,modes,forwards,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{},{},{:.3}",
            self.iteration,
            self.loss,
            self.mode_string(),
            self.forwards,
            self.wall_ms
        )
    }
}

/// One pass of the memory-efficient loop. Every layer gradient is handed to
/// `sink` as soon as it is estimated; the activations passed on to later
/// layers are computed from the parameters as they were before `sink` ran.
fn run_step(
    model: &mut QModel,
    batch: &Batch,
    cfg: &PerturbConfig,
    iteration: u64,
    sink: &mut dyn FnMut(&mut QModel, LayerGrad) -> Result<()>,
) -> Result<StepReport> {
    let t0 = Instant::now();
    cfg.validate()?;
    model.check_batch(batch)?;
    let trainable = model.trainable_layers();
    if trainable.is_empty() {
        return Err(Error::InvalidArgument("model has no trainable layers".into()));
    }
    let q = cfg.queries_per_layer(trainable.len());
    check_indices(model.num_layers(), batch.len(), q)?;
    let n = batch.len();
    let mut cost = Cost::default();
    let clean = clean_losses(model, batch, &mut cost)?;
    let mut modes = Vec::with_capacity(trainable.len());
    let mut seeds = Vec::new();
    let mut sq_norm = 0.0;

    if cfg.mode == PerturbMode::ModelWp {
        let acts = propagate(model, batch, 0, &mut cost)?;
        let d = trainable.iter().map(|&l| model.layer(l).d_w()).sum();
        let cache = Cache {
            start: 0,
            acts: &acts,
            clean: &clean,
            labels: batch.labels(),
        };
        let grads = wp_core(model, &trainable, &cache, q, d, cfg, &mut cost, &mut seeds)?;
        for g in grads {
            modes.push((g.layer, Mode::Wp));
            sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            sink(model, g)?;
        }
    } else {
        let last = *trainable.last().unwrap();
        let mut acts: Vec<Vec<i32>> = (0..n).map(|k| batch.sample(k).to_vec()).collect();
        for i in 0..=last {
            cost.macs += model.layer(i).macs() * n as u64;
            let z = acts
                .iter()
                .map(|a| model.layer(i).preactivation(a).map_err(|e| at_layer(e, i)))
                .collect::<Result<Vec<_>>>()?;
            let mut next = z.clone();
            for a in next.iter_mut() {
                model.layer(i).activation().apply(a);
            }
            if model.is_trainable(i) {
                let mode = match cfg.mode {
                    PerturbMode::LayerWp => Mode::Wp,
                    PerturbMode::LayerNp => Mode::Np,
                    _ => choose_mode(model.layer(i)),
                };
                let cache = Cache {
                    start: i,
                    acts: &acts,
                    clean: &clean,
                    labels: batch.labels(),
                };
                let g = match mode {
                    Mode::Wp => {
                        let d = model.layer(i).d_w();
                        wp_core(model, &[i], &cache, q, d, cfg, &mut cost, &mut seeds)?
                            .pop()
                            .unwrap()
                    }
                    Mode::Np => np_core(model, &z, &cache, q, cfg, &mut cost, &mut seeds)?,
                };
                modes.push((i, mode));
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
                sink(model, g)?;
            }
            acts = next;
        }
    }
    Ok(StepReport {
        iteration,
        loss: clean.iter().sum::<f64>() / n as f64,
        modes,
        base_seed: cfg.base_seed,
        queries_per_layer: q,
        forwards: cost.forwards,
        macs: cost.macs,
        grad_norm: sq_norm.sqrt(),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Apply `θ̄ ← clip(θ̄ − round(gns · qas · η · ĝ))` for each layer gradient,
/// using `s_W` for weights and `s_W s_x` for biases.
pub fn apply_grads(model: &mut QModel, grads: &[LayerGrad], eta: f64, scaling: Scaling) -> Result<()> {
    for g in grads {
        let layer = model.layer_mut(g.layer);
        let kw = step_size(eta, g.n, g.q, g.d, layer.s_w as f64, scaling)?;
        let kb = step_size(eta, g.n, g.q, g.d, layer.bias_scale(), scaling)?;
        let (Some(w), Some(b)) = (layer.weights.as_mut(), layer.bias.as_mut()) else {
            return Err(Error::InvalidArgument(format!("layer {} has no parameters", g.layer)));
        };
        apply_step_inplace(w, &g.weight, kw)?;
        apply_step_inplace(b, &g.bias, kb)?;
    }
    Ok(())
}

/// Estimate every trainable layer's gradient at the current parameters
/// without updating. The model is left bit-identical.
pub fn estimate_step(
    model: &mut QModel,
    batch: &Batch,
    cfg: &PerturbConfig,
    iteration: u64,
) -> Result<(Vec<LayerGrad>, StepReport)> {
    let mut grads = Vec::new();
    let report = run_step(model, batch, cfg, iteration, &mut |_, g| {
        grads.push(g);
        Ok(())
    })?;
    Ok((grads, report))
}

/// One training step: a clean forward, then per trainable layer in order an
/// estimate at the step-`t` parameters followed by the update of that layer.
///
/// The result equals estimating every layer first and updating afterwards.
/// On error the model is left unchanged.
pub fn train_step(
    model: &mut QModel,
    batch: &Batch,
    cfg: &PerturbConfig,
    eta: f64,
    scaling: Scaling,
    iteration: u64,
) -> Result<StepReport> {
    let backup = model.clone();
    let res = run_step(model, batch, cfg, iteration, &mut |m, g| {
        apply_grads(m, std::slice::from_ref(&g), eta, scaling)
    });
    if res.is_err() {
        *model = backup;
    }
    res
}

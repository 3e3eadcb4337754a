//! Epoch loop: shuffling, gradient accumulation, learning-rate schedule and
//! per-update metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, QModel};
use crate::optim::{cosine_lr, Scaling};
use crate::prng::stream_seed;
use crate::zo::{apply_grads, estimate_step, train_step, LayerGrad, PerturbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    Block(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches whose estimates are averaged into one update.
    pub accumulation: usize,
    pub perturb: PerturbConfig,
    pub scaling: Scaling,
    pub scope: TrainScope,
    pub schedule: Schedule,
    /// Run seed; per micro-batch perturbation seeds derive from it.
    pub seed: u32,
    pub shuffle: bool,
    /// Stop after this many updates.
    pub max_steps: Option<usize>,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            epochs: 1,
            batch_size: 1,
            accumulation: 1,
            perturb: PerturbConfig::default(),
            scaling: Scaling::default(),
            scope: TrainScope::All,
            schedule: Schedule::Cosine,
            seed: 1,
            shuffle: true,
            max_steps: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.eta0)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config(
                "epochs, batch size and accumulation must be at least 1".into(),
            ));
        }
        if self.seed == 0 {
            return Err(Error::ZeroSeed);
        }
        let mut p = self.perturb;
        p.base_seed = 1;
        p.validate()
    }

    /// Updates in a run over `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let micro = n.div_ceil(self.batch_size);
        let per_epoch = micro.div_ceil(self.accumulation);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// One metrics row per update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub forwards: u64,
    pub macs: u64,
    pub mode: String,
    pub block: Option<usize>,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "iteration,epoch,loss,lr,forwards,mode,block,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9e},{},{},{},{:.3}",
            self.iteration,
            self.epoch,
            self.loss,
            self.lr,
            self.forwards,
            self.mode,
            self.block.map_or("all".to_string(), |b| b.to_string()),
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub forwards: u64,
    pub macs: u64,
    pub final_loss: f64,
}

/// Weighted average of per-micro-batch estimates (weights = sample counts).
fn average(parts: Vec<Vec<LayerGrad>>) -> Vec<LayerGrad> {
    let total: usize = parts.iter().map(|p| p[0].n).sum();
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap();
    for g in acc.iter_mut() {
        let w = g.n as f64 / total as f64;
        g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= w);
    }
    for part in it {
        for (a, g) in acc.iter_mut().zip(part) {
            let w = g.n as f64 / total as f64;
            for (x, y) in a.weight.iter_mut().zip(&g.weight) {
                *x += w * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&g.bias) {
                *x += w * y;
            }
        }
    }
    for g in acc.iter_mut() {
        g.n = total;
    }
    acc
}

/// Train in place over `data`, calling `on_step` after every update.
pub fn train(
    model: &mut QModel,
    data: &Batch,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.check_batch(data)?;
    let block = match cfg.scope {
        TrainScope::All => {
            model.set_all_trainable();
            None
        }
        TrainScope::Block(b) => {
            model.set_trainable(b)?;
            Some(b)
        }
    };
    let total = cfg.total_steps(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut summary = TrainSummary {
        steps: 0,
        forwards: 0,
        macs: 0,
        final_loss: f64::NAN,
    };
    let mut micro_index = 0u64;
    'epochs: for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(((cfg.seed as u64) << 32) | epoch as u64);
            order.shuffle(&mut rng);
        }
        let micro: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in micro.chunks(cfg.accumulation) {
            if summary.steps >= total {
                break 'epochs;
            }
            let t0 = Instant::now();
            let lr = match cfg.schedule {
                Schedule::Cosine => cosine_lr(summary.steps, total, cfg.eta0)?,
                Schedule::Constant => cfg.eta0,
            };
            let (mut loss, mut forwards, mut macs, mut mode) = (0.0, 0, 0, String::new());
            let mut seen = 0;
            if group.len() == 1 {
                let b = data.select(group[0])?;
                let p = PerturbConfig {
                    base_seed: stream_seed(cfg.seed, micro_index),
                    ..cfg.perturb
                };
                micro_index += 1;
                let r = train_step(model, &b, &p, lr, cfg.scaling, summary.steps as u64)?;
                loss = r.loss * b.len() as f64;
                seen = b.len();
                forwards = r.forwards;
                macs = r.macs;
                mode = r.mode_string();
            } else {
                let mut parts = Vec::with_capacity(group.len());
                for idx in group {
                    let b = data.select(idx)?;
                    let p = PerturbConfig {
                        base_seed: stream_seed(cfg.seed, micro_index),
                        ..cfg.perturb
                    };
                    micro_index += 1;
                    let (g, r) = estimate_step(model, &b, &p, summary.steps as u64)?;
                    loss += r.loss * b.len() as f64;
                    seen += b.len();
                    forwards += r.forwards;
                    macs += r.macs;
                    mode = r.mode_string();
                    parts.push(g);
                }
                apply_grads(model, &average(parts), lr, cfg.scaling)?;
            }
            let m = StepMetrics {
                iteration: summary.steps,
                epoch,
                loss: loss / seen as f64,
                lr,
                forwards,
                macs,
                mode,
                block,
                wall_ms: if cfg.record_wall_time {
                    t0.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            };
            summary.steps += 1;
            summary.forwards += forwards;
            summary.macs += macs;
            summary.final_loss = m.loss;
            on_step(&m)?;
        }
    }
    Ok(summary)
}

/// Mean loss and top-1 accuracy.
pub fn evaluate(model: &QModel, data: &Batch) -> Result<(f64, f64)> {
    let out = model.forward(data)?;
    Ok((out.mean_loss(), model.accuracy(data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerKind, LayerSpec};
    use crate::zo::Mode;

    fn grad(n: usize, v: f64) -> LayerGrad {
        LayerGrad {
            layer: 0,
            mode: Mode::Wp,
            weight: vec![v],
            bias: vec![2.0 * v],
            n,
            q: 1,
            d: 2,
        }
    }

    #[test]
    fn accumulation_averages_by_sample_count() {
        let g = average(vec![vec![grad(1, 1.0)], vec![grad(3, 5.0)]]);
        assert_eq!(g[0].weight, vec![4.0]);
        assert_eq!(g[0].bias, vec![8.0]);
        assert_eq!(g[0].n, 4);
    }

    #[test]
    fn step_count() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            accumulation: 2,
            ..Default::default()
        };
        // 10 samples -> 3 micro-batches -> 2 updates per epoch
        assert_eq!(cfg.total_steps(10), 6);
        let capped = TrainConfig {
            max_steps: Some(4),
            ..cfg
        };
        assert_eq!(capped.total_steps(10), 4);
    }

    #[test]
    fn metrics_row() {
        let m = StepMetrics {
            iteration: 3,
            epoch: 0,
            loss: 0.25,
            lr: 0.01,
            forwards: 40,
            macs: 0,
            mode: "0:wp".into(),
            block: None,
            wall_ms: 0.0,
        };
        assert_eq!(m.csv_row(), "3,0,0.250000000,1.000000000e-2,40,0:wp,all,0.000");
    }

    #[test]
    fn training_is_reproducible() {
        let l = LayerSpec::linear(
            LayerKind::FullyConnected { out_features: 2 },
            vec![2],
            vec![10, -10, -10, 10],
            vec![0, 0],
            0.01,
            0.01,
            0.01,
            Activation::Identity,
        )
        .unwrap();
        let m0 = QModel::new(vec![l], 2).unwrap();
        let feats: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let data = Batch::from_features(&feats, &[2], &labels, 0.01f32 as f64).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            accumulation: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = m0.clone();
            let mut rows = vec![];
            train(&mut m, &data, &cfg, |r| {
                rows.push(r.csv_row());
                Ok(())
            })
            .unwrap();
            (m, rows)
        };
        assert_eq!(run(), run());
        assert_eq!(run().1.len(), 4);
    }
}

//! Task-adaptive choice of a single trainable block.
//!
//! Each block is trial-trained for one epoch on a clone of the model; the
//! block with the largest held-out accuracy gain becomes the training scope.

use crate::error::{Error, Result};
use crate::model::{Batch, QModel};
use crate::train::{train, Schedule, TrainConfig, TrainScope};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrial {
    pub block: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub gain: f64,
    pub forwards: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub trials: Vec<BlockTrial>,
    pub chosen: usize,
    pub forwards: u64,
}

impl SelectionReport {
    pub const CSV_HEADER: &'static str = "block,acc_before,acc_after,gain";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for t in &self.trials {
            s += &format!("{},{:.6},{:.6},{:.6}\n", t.block, t.acc_before, t.acc_after, t.gain);
        }
        s
    }
}

/// Index of the largest gain; the lowest index wins ties.
pub fn argmax_gain(gains: &[f64]) -> usize {
    let mut best = 0;
    for (i, &g) in gains.iter().enumerate() {
        if g > gains[best] {
            best = i;
        }
    }
    best
}

/// One-epoch trial of every block, constant learning rate `cfg.eta0`. The
/// base model is not modified.
pub fn select_block(
    model: &QModel,
    train_subset: &Batch,
    heldout: &Batch,
    cfg: &TrainConfig,
) -> Result<SelectionReport> {
    if train_subset.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let before = model.accuracy(heldout)?;
    let trial_cfg = TrainConfig {
        epochs: 1,
        schedule: Schedule::Constant,
        max_steps: None,
        ..cfg.clone()
    };
    let mut trials = Vec::with_capacity(model.num_blocks());
    for block in 0..model.num_blocks() {
        let mut m = model.clone();
        let s = train(
            &mut m,
            train_subset,
            &TrainConfig {
                scope: TrainScope::Block(block),
                ..trial_cfg.clone()
            },
            |_| Ok(()),
        )?;
        let after = m.accuracy(heldout)?;
        trials.push(BlockTrial {
            block,
            acc_before: before,
            acc_after: after,
            gain: after - before,
            forwards: s.forwards,
        });
    }
    let gains: Vec<f64> = trials.iter().map(|t| t.gain).collect();
    Ok(SelectionReport {
        chosen: argmax_gain(&gains),
        forwards: trials.iter().map(|t| t.forwards).sum(),
        trials,
    })
}

//! Command-line front end.
//!
//! Settings come from an INI-style file (`[section]` headers, `key = value`
//! lines), then `--set key=value` overrides, then the dedicated flags.
//! Artifacts are written to the output directory:
//!
//! | command | artifacts |
//! |---|---|
//! | `init` | `model.ckpt` |
//! | `train` | `metrics.csv`, `final.ckpt`, `selection.csv` when selecting |
//! | `select-block` | `selection.csv` |
//! | `profile` | `profile.csv` |
//! | `grad-check` | `gradcheck.csv` |
//! | `eval` | `eval.csv` |

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;

pub use config::{Command, RunConfig, Settings};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    checkpoint_load, checkpoint_save, partition_blocks, ptq_calibrate, Activation, Batch, FpBatch,
    FpModel, LayerKind, QModel,
};
use crate::oracle::{bp_grad_fp, estimate_similarity, similarity_csv};
use crate::profiler::{predict_step_cost, profile_dims, reports_csv, reports_table, ModelDims};
use crate::sparse::select_block;
use crate::train::{evaluate, train, StepMetrics, TrainConfig, TrainScope};
use crate::zo::{choose_mode, estimate_grad_np, estimate_grad_wp, Mode, Scope};

#[derive(Debug, Parser)]
#[command(name = "qzo", version, about = "BP-free training of INT8 quantized networks")]
pub struct Cli {
    /// Settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u32>,
    /// Model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset (CSV or QDS1).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub command: Option<Command>,
    /// Override a setting, e.g. `--set train.eta0=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Cli {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for a in &self.set {
            s.set(a)?;
        }
        if let Some(c) = self.command {
            s.insert("run.command", clap::ValueEnum::to_possible_value(&c).unwrap().get_name());
        }
        if let Some(v) = self.seed {
            s.insert("run.seed", &v.to_string());
        }
        for (k, v) in [("paths.model", &self.model), ("paths.data", &self.data), ("paths.out", &self.out)] {
            if let Some(p) = v {
                s.insert(k, &p.to_string_lossy());
            }
        }
        Ok(s)
    }
}

/// Parse a layer list such as `conv:8:3:1:1:relu,dw:3:2:1:relu,gap,fc:10`.
///
/// Tokens: `fc:OUT`, `conv:OUT:K:STRIDE:PAD`, `dw:K:STRIDE:PAD`, `gap`, each
/// optionally followed by `:relu`.
pub fn parse_arch(spec: &str) -> Result<Vec<(LayerKind, Activation)>> {
    spec.split(',')
        .map(|tok| {
            let mut parts: Vec<&str> = tok.trim().split(':').collect();
            let act = if parts.last() == Some(&"relu") {
                parts.pop();
                Activation::Relu
            } else {
                Activation::Identity
            };
            let bad = || Error::Config(format!("invalid layer {tok:?} in key \"model.arch\""));
            let nums = parts[1..]
                .iter()
                .map(|p| p.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let kind = match (parts[0], nums.as_slice()) {
                ("fc", &[out]) => LayerKind::FullyConnected { out_features: out },
                ("conv", &[out, k, stride, padding]) => LayerKind::Conv2d {
                    out_channels: out,
                    kernel: (k, k),
                    stride,
                    padding,
                },
                ("dw", &[k, stride, padding]) => LayerKind::DepthwiseConv2d {
                    kernel: (k, k),
                    stride,
                    padding,
                },
                ("gap", &[]) => LayerKind::GlobalAvgPool,
                _ => return Err(bad()),
            };
            Ok((kind, act))
        })
        .collect()
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("command needs a {what} path (--{what})")))
}

fn load_model(cfg: &RunConfig) -> Result<QModel> {
    let p = require(&cfg.model, "model")?;
    checkpoint_load(p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let p = require(&cfg.data, "data")?;
    Dataset::load(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
}

fn batch_for(model: &QModel, data: &Dataset) -> Result<Batch> {
    data.to_batch(model.input_scale(), Some(model.input_shape()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(b) = cfg.block {
        t.scope = TrainScope::Block(b);
    }
    t
}

fn cmd_init(cfg: &RunConfig) -> Result<String> {
    let arch = cfg
        .arch
        .as_deref()
        .ok_or_else(|| Error::Config("init needs key \"model.arch\"".into()))?;
    let data = load_data(cfg)?;
    let fp = FpModel::random(data.sample_shape(), &parse_arch(arch)?, cfg.seed as u64)?;
    let mut model = ptq_calibrate(&fp, &data.rows())?;
    let blocks = cfg.blocks.min(model.layers().iter().filter(|l| l.has_params()).count());
    model.set_partition(partition_blocks(&model, blocks)?, blocks)?;
    let path = cfg.out.join("model.ckpt");
    checkpoint_save(&model, &path)?;
    Ok(format!("wrote {}", path.display()))
}

fn cmd_select(cfg: &RunConfig, model: &QModel, data: &Dataset) -> Result<usize> {
    let (tr, held) = data.holdout_split()?;
    let report = select_block(model, &batch_for(model, &tr)?, &batch_for(model, &held)?, &cfg.train)?;
    write(&cfg.out.join("selection.csv"), &report.to_csv())?;
    Ok(report.chosen)
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let mut model = load_model(cfg)?;
    let data = load_data(cfg)?;
    let mut tc = train_config(cfg);
    if cfg.select_block {
        tc.scope = TrainScope::Block(cmd_select(cfg, &model, &data)?);
    }
    let batch = batch_for(&model, &data)?;
    let mut w = BufWriter::new(fs::File::create(cfg.out.join("metrics.csv"))?);
    writeln!(w, "{}", StepMetrics::CSV_HEADER)?;
    let summary = train(&mut model, &batch, &tc, |m| {
        writeln!(w, "{}", m.csv_row())?;
        Ok(())
    })?;
    w.flush()?;
    let path = cfg.out.join("final.ckpt");
    checkpoint_save(&model, &path)?;
    Ok(format!(
        "{} steps, {} forwards, final loss {:.6}; wrote {}",
        summary.steps,
        summary.forwards,
        summary.final_loss,
        path.display()
    ))
}

fn cmd_select_block(cfg: &RunConfig) -> Result<String> {
    let model = load_model(cfg)?;
    let data = load_data(cfg)?;
    let chosen = cmd_select(cfg, &model, &data)?;
    Ok(format!("selected block {chosen}"))
}

fn cmd_profile(cfg: &RunConfig) -> Result<String> {
    let model = load_model(cfg)?;
    let n = cfg.profile_n.unwrap_or(cfg.train.batch_size) as u64;
    let q = cfg.profile_q.unwrap_or(cfg.train.perturb.q) as u64;
    let base = ModelDims::of(&model)?;
    let [l, d_a, d_w] = cfg.profile_dims;
    let dims = ModelDims {
        l: l.unwrap_or(base.l),
        d_a: d_a.unwrap_or(base.d_a),
        d_w: d_w.unwrap_or(base.d_w),
    };
    let reports = profile_dims(&model, dims, n, q)?;
    write(&cfg.out.join("profile.csv"), &reports_csv(&reports))?;
    let step = predict_step_cost(&model, &cfg.train.perturb, n as usize)?;
    Ok(format!(
        "{}\n{} step: {} forwards, {} MACs",
        reports_table(&reports).trim_end(),
        cfg.train.perturb.mode.name(),
        step.forwards,
        step.macs
    ))
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<String> {
    let mut model = load_model(cfg)?;
    let data = load_data(cfg)?;
    let batch = batch_for(&model, &data)?;
    let batch = batch.slice(0, cfg.gradcheck_samples.min(batch.len()))?;
    let fp = FpModel::from_qmodel(&model);
    let bp = bp_grad_fp(&fp, &FpBatch::from_batch(&batch))?;
    let p = &cfg.train.perturb;
    let model_wide = estimate_grad_wp(&mut model, Scope::All, &batch, p.q, p)?;
    let mut rows = Vec::new();
    for i in model.trainable_layers() {
        let wp = estimate_grad_wp(&mut model, Scope::Layer(i), &batch, p.q, p)?;
        let np = estimate_grad_np(&model, i, &batch, p.q, p)?;
        let mw = model_wide.layer(i).expect("every trainable layer is estimated");
        let wp_c = estimate_similarity(&model, &wp.layers[0], &bp)?;
        let np_c = estimate_similarity(&model, &np.layers[0], &bp)?;
        let adaptive = match choose_mode(model.layer(i)) {
            Mode::Wp => wp_c,
            Mode::Np => np_c,
        };
        rows.push((i, "model-wp".to_string(), estimate_similarity(&model, mw, &bp)?));
        rows.push((i, "layer-wp".to_string(), wp_c));
        rows.push((i, "layer-np".to_string(), np_c));
        rows.push((i, "adaptive".to_string(), adaptive));
    }
    let csv = similarity_csv(&rows);
    write(&cfg.out.join("gradcheck.csv"), &csv)?;
    Ok(csv.trim_end().to_string())
}

fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let model = load_model(cfg)?;
    let data = load_data(cfg)?;
    let (loss, acc) = evaluate(&model, &batch_for(&model, &data)?)?;
    write(&cfg.out.join("eval.csv"), &format!("loss,accuracy\n{loss:.9},{acc:.6}\n"))?;
    Ok(format!("loss {loss:.6}, accuracy {acc:.4}"))
}

/// Execute a resolved run and return a human-readable summary.
pub fn run(cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(&cfg.out)?;
    match cfg.command {
        Command::Init => cmd_init(cfg),
        Command::Train => cmd_train(cfg),
        Command::SelectBlock => cmd_select_block(cfg),
        Command::Profile => cmd_profile(cfg),
        Command::GradCheck => cmd_grad_check(cfg),
        Command::Eval => cmd_eval(cfg),
    }
}

/// Parse arguments, resolve settings and run.
pub fn main_with(cli: &Cli) -> Result<String> {
    run(&RunConfig::from_settings(cli.settings()?)?)
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::optim::Scaling;
use crate::train::{Schedule, TrainConfig};
use crate::zo::{PerturbConfig, PerturbMode};

/// Flattened `section.key = value` settings. Keys outside a section are
/// stored under their bare name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{}.{}", s.trim(), k.trim()),
                    None => k.trim().to_string(),
                };
                if map.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(Error::Config(format!("duplicate key {key:?}")));
                }
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.insert(k.trim(), v.trim());
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key:?}"))),
        }
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.0.remove(key).as_deref() {
            None => Ok(None),
            Some("true" | "yes" | "on" | "1") => Ok(Some(true)),
            Some("false" | "no" | "off" | "0") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("invalid boolean {v:?} for key {key:?}"))),
        }
    }
}

/// CLI workflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Build a quantized model from a layer list and calibration data.
    Init,
    Train,
    SelectBlock,
    Profile,
    GradCheck,
    Eval,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        <Command as clap::ValueEnum>::from_str(s, true)
            .map_err(|_| Error::Config(format!("unknown command {s:?}")))
    }
}

/// Everything a run needs, resolved from the config file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u32,
    pub train: TrainConfig,
    pub select_block: bool,
    pub block: Option<usize>,
    pub arch: Option<String>,
    pub blocks: usize,
    pub profile_n: Option<usize>,
    pub profile_q: Option<usize>,
    pub profile_dims: [Option<u64>; 3],
    pub gradcheck_samples: usize,
}

impl RunConfig {
    /// Resolve settings. Unrecognized keys are an error.
    pub fn from_settings(mut s: Settings) -> Result<Self> {
        let command = s
            .take::<Command>("run.command")?
            .ok_or_else(|| Error::Config("no command given".into()))?;
        let seed = s.take("run.seed")?.unwrap_or(1u32);
        if seed == 0 {
            return Err(Error::Config("key \"run.seed\" must be nonzero".into()));
        }
        let d = TrainConfig::default();
        let p = PerturbConfig::default();
        let mode = match s.0.remove("perturb.mode") {
            Some(m) => PerturbMode::parse(&m)
                .map_err(|e| Error::Config(format!("key \"perturb.mode\": {e}")))?,
            None => p.mode,
        };
        let schedule = match s.0.remove("train.schedule").as_deref() {
            None | Some("cosine") => Schedule::Cosine,
            Some("constant") => Schedule::Constant,
            Some(v) => {
                return Err(Error::Config(format!("invalid value {v:?} for key \"train.schedule\"")))
            }
        };
        let train = TrainConfig {
            eta0: s.take("train.eta0")?.unwrap_or(d.eta0),
            epochs: s.take("train.epochs")?.unwrap_or(d.epochs),
            batch_size: s.take("train.batch_size")?.unwrap_or(d.batch_size),
            accumulation: s.take("train.accumulation")?.unwrap_or(100),
            perturb: PerturbConfig {
                mode,
                q: s.take("perturb.q")?.unwrap_or(p.q),
                mu: s.take("perturb.mu")?.unwrap_or(p.mu),
                base_seed: seed,
                share_wp_across_batch: s
                    .take_bool("perturb.share_wp_across_batch")?
                    .unwrap_or(p.share_wp_across_batch),
                per_sample_np: s.take_bool("perturb.per_sample_np")?.unwrap_or(p.per_sample_np),
            },
            scaling: Scaling {
                gns: s.take_bool("train.gns")?.unwrap_or(true),
                qas: s.take_bool("train.qas")?.unwrap_or(true),
            },
            scope: d.scope,
            schedule,
            seed,
            shuffle: s.take_bool("train.shuffle")?.unwrap_or(d.shuffle),
            max_steps: s.take("train.max_steps")?,
            record_wall_time: s.take_bool("train.record_wall_time")?.unwrap_or(false),
        };
        let cfg = Self {
            command,
            model: s.take("paths.model")?,
            data: s.take("paths.data")?,
            out: s.take("paths.out")?.unwrap_or_else(|| PathBuf::from(".")),
            seed,
            train,
            select_block: s.take_bool("train.select_block")?.unwrap_or(false),
            block: s.take("train.block")?,
            arch: s.take("model.arch")?,
            blocks: s.take("model.blocks")?.unwrap_or(4),
            profile_n: s.take("profile.n")?,
            profile_q: s.take("profile.q")?,
            profile_dims: [s.take("profile.l")?, s.take("profile.d_a")?, s.take("profile.d_w")?],
            gradcheck_samples: s.take("gradcheck.samples")?.unwrap_or(8),
        };
        if let Some(k) = s.0.keys().next() {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

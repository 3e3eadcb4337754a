//! Analytic memory and compute accounting for inference, zeroth-order
//! training variants and backpropagation.
//!
//! Memory is counted in elements. Byte figures use 1 byte per 8-bit weight
//! or activation and 4 bytes per 32-bit gradient, accumulator or loss value.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::QModel;
use crate::zo::{choose_mode, Mode, PerturbConfig, PerturbMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Inference,
    WpVanilla,
    WpEfficient,
    NpVanilla,
    NpEfficient,
    Bp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Inference,
        Method::WpVanilla,
        Method::WpEfficient,
        Method::NpVanilla,
        Method::NpEfficient,
        Method::Bp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Inference => "inference",
            Method::WpVanilla => "WP-vanilla",
            Method::WpEfficient => "WP-efficient",
            Method::NpVanilla => "NP-vanilla",
            Method::NpEfficient => "NP-efficient",
            Method::Bp => "BP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown profiling method {s:?}")))
    }

    fn is_zo(self) -> bool {
        !matches!(self, Method::Inference | Method::Bp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Element counts split by storage width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub narrow: u64,
    pub wide: u64,
}

impl Footprint {
    pub fn elements(&self) -> u64 {
        self.narrow + self.wide
    }

    pub fn bytes(&self) -> u64 {
        self.narrow + 4 * self.wide
    }
}

fn footprint(l: u64, d_a: u64, d_w: u64, n: u64, q: u64, method: Method) -> Footprint {
    let (narrow, wide) = match method {
        Method::Inference => (n * (2 * d_a + d_w), 0),
        Method::WpVanilla => (0, l * d_w),
        Method::WpEfficient => (0, l * q),
        Method::NpVanilla | Method::Bp => (n * l * d_a, l * d_w),
        Method::NpEfficient => (0, n * l * q + d_w),
    };
    Footprint { narrow, wide }
}

fn check_positive(args: &[(&str, u64)]) -> Result<()> {
    match args.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::InvalidArgument(format!("{name} must be at least 1"))),
        None => Ok(()),
    }
}

/// Peak memory in elements.
///
/// | method | elements |
/// |---|---|
/// | inference | `N(2d_a + d_w)` |
/// | WP vanilla | `L d_w` |
/// | WP efficient | `L Q` |
/// | NP vanilla | `N L d_a + L d_w` |
/// | NP efficient | `N L Q + d_w` |
/// | BP | `N L d_a + L d_w` |
pub fn analytic_memory(l: u64, d_a: u64, d_w: u64, n: u64, q: u64, method: Method) -> Result<u64> {
    check_positive(&[("L", l), ("d_a", d_a), ("d_w", d_w), ("N", n), ("Q", q)])?;
    Ok(footprint(l, d_a, d_w, n, q, method).elements())
}

/// Same as [`analytic_memory`], in bytes.
pub fn analytic_memory_bytes(l: u64, d_a: u64, d_w: u64, n: u64, q: u64, method: Method) -> Result<u64> {
    check_positive(&[("L", l), ("d_a", d_a), ("d_w", d_w), ("N", n), ("Q", q)])?;
    Ok(footprint(l, d_a, d_w, n, q, method).bytes())
}

/// Multiply-accumulates of one iteration: `N F` for inference,
/// `N F + N Q F` for perturbation methods and `3 N F` for BP, where the
/// backward pass is counted as twice the forward.
pub fn mac_count(model: &QModel, method: Method, n: u64, q: u64) -> u64 {
    let f = model.macs_from(0);
    match method {
        Method::Inference => n * f,
        Method::Bp => 3 * n * f,
        _ => n * f + n * q * f,
    }
}

/// Sample-level forward evaluations of one iteration.
pub fn forward_count(method: Method, n: u64, q: u64) -> u64 {
    if method.is_zo() {
        n + n * q
    } else {
        n
    }
}

/// Cost of one step as counted by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCost {
    pub forwards: u64,
    pub macs: u64,
}

/// Predicted forward evaluations and MACs of one training step with `n`
/// samples under `cfg`, for the model's current trainable set.
pub fn predict_step_cost(model: &QModel, cfg: &PerturbConfig, n: usize) -> Result<StepCost> {
    let trainable = model.trainable_layers();
    let Some(&last) = trainable.last() else {
        return Err(Error::InvalidArgument("model has no trainable layers".into()));
    };
    let n = n as u64;
    let q = cfg.queries_per_layer(trainable.len()) as u64;
    let f = model.macs_from(0);
    let mut cost = StepCost {
        forwards: n,
        macs: n * f,
    };
    if cfg.mode == PerturbMode::ModelWp {
        cost.forwards += q * n;
        cost.macs += q * n * f;
        return Ok(cost);
    }
    for i in 0..=last {
        cost.macs += n * model.layer(i).macs();
        if !model.is_trainable(i) {
            continue;
        }
        let mode = match cfg.mode {
            PerturbMode::LayerWp => Mode::Wp,
            PerturbMode::LayerNp => Mode::Np,
            _ => choose_mode(model.layer(i)),
        };
        let start = match mode {
            Mode::Wp => i,
            Mode::Np => i + 1,
        };
        cost.forwards += q * n;
        cost.macs += q * n * model.macs_from(start);
    }
    Ok(cost)
}

/// Shape parameters a model contributes to the closed forms: `L` is the
/// number of trainable layers, `d_a` and `d_w` the largest per-layer output
/// and parameter counts among them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub l: u64,
    pub d_a: u64,
    pub d_w: u64,
}

impl ModelDims {
    pub fn of(model: &QModel) -> Result<Self> {
        let t = model.trainable_layers();
        if t.is_empty() {
            return Err(Error::InvalidArgument("model has no trainable layers".into()));
        }
        Ok(Self {
            l: t.len() as u64,
            d_a: t.iter().map(|&i| model.layer(i).d_a() as u64).max().unwrap(),
            d_w: t.iter().map(|&i| model.layer(i).d_w() as u64).max().unwrap(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileReport {
    pub method: Method,
    pub memory_elements: u64,
    pub memory_bytes: u64,
    pub forwards: u64,
    pub macs: u64,
}

impl ProfileReport {
    pub const CSV_HEADER: &'static str = "method,memory_elements,memory_bytes,forwards,macs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.memory_elements, self.memory_bytes, self.forwards, self.macs
        )
    }
}

/// One report per method for explicit dimensions and a model's MAC counts.
pub fn profile_dims(model: &QModel, dims: ModelDims, n: u64, q: u64) -> Result<Vec<ProfileReport>> {
    Method::ALL
        .into_iter()
        .map(|m| {
            Ok(ProfileReport {
                method: m,
                memory_elements: analytic_memory(dims.l, dims.d_a, dims.d_w, n, q, m)?,
                memory_bytes: analytic_memory_bytes(dims.l, dims.d_a, dims.d_w, n, q, m)?,
                forwards: forward_count(m, n, q),
                macs: mac_count(model, m, n, q),
            })
        })
        .collect()
}

/// [`profile_dims`] with dimensions taken from the model.
pub fn profile(model: &QModel, n: u64, q: u64) -> Result<Vec<ProfileReport>> {
    profile_dims(model, ModelDims::of(model)?, n, q)
}

pub fn reports_csv(reports: &[ProfileReport]) -> String {
    let mut s = format!("{}\n", ProfileReport::CSV_HEADER);
    for r in reports {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

pub fn reports_table(reports: &[ProfileReport]) -> String {
    let mut s = format!(
        "{:<14}{:>16}{:>16}{:>12}{:>16}\n",
        "method", "memory (elem)", "memory (B)", "forwards", "MACs"
    );
    for r in reports {
        s += &format!(
            "{:<14}{:>16}{:>16}{:>12}{:>16}\n",
            r.method.name(),
            r.memory_elements,
            r.memory_bytes,
            r.forwards,
            r.macs
        );
    }
    s
}

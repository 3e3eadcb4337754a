//! Dataset ingestion: the `QDS1` binary image format and label-first CSV.
//!
//! ```text
//! "QDS1" | count u32 | channels u32 | height u32 | width u32
//! pixels u8 (sample-major, count·C·H·W) | labels u32 (count)
//! ```
//!
//! Pixels are read as `p / 255`. CSV rows are `label,f1,f2,...` and load as
//! flat feature vectors.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const QDS_MAGIC: &[u8; 4] = b"QDS1";

/// Floating-point samples with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, sample_shape: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let k: usize = sample_shape.iter().product();
        if labels.is_empty() || k == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if features.len() != k * labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature values for {} samples of size {k}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            features,
            sample_shape,
            labels,
        })
    }

    /// Load by content: `QDS1` magic selects the binary reader, anything else
    /// is parsed as CSV.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let parsed = if bytes.starts_with(QDS_MAGIC) {
            Self::decode_qds(&bytes)
        } else {
            Self::read_csv(bytes.as_slice())
        };
        parsed.map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn decode_qds(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != QDS_MAGIC {
            return Err(Error::Dataset("not a QDS1 file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, c, h, w) = (word(0), word(1), word(2), word(3));
        let k = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Dataset("image dimensions overflow".into()))?;
        let need = n
            .checked_mul(k + 4)
            .and_then(|v| v.checked_add(20))
            .ok_or_else(|| Error::Dataset("sample count overflow".into()))?;
        if bytes.len() != need {
            return Err(Error::Dataset(format!(
                "expected {need} bytes, found {}",
                bytes.len()
            )));
        }
        let pixels = &bytes[20..20 + n * k];
        let labels = bytes[20 + n * k..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        Self::new(
            pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            vec![c, h, w],
            labels,
        )
    }

    /// Encode as `QDS1`; features are mapped back to pixels by `round(255·v)`.
    pub fn encode_qds(&self) -> Result<Vec<u8>> {
        let [c, h, w] = self.sample_shape[..] else {
            return Err(Error::Dataset("QDS1 requires [C, H, W] samples".into()));
        };
        let mut out = QDS_MAGIC.to_vec();
        for v in [self.len(), c, h, w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(self.features.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let (mut features, mut labels, mut width) = (Vec::new(), Vec::new(), None);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Dataset(format!("row {}: {e}", row + 1)))?;
            let bad = |what: &str| Error::Dataset(format!("row {}: invalid {what}", row + 1));
            let mut it = rec.iter();
            let label = it
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad("label"))?;
            let before = features.len();
            for s in it {
                features.push(s.parse::<f64>().map_err(|_| bad("feature"))?);
            }
            let k = features.len() - before;
            if *width.get_or_insert(k) != k {
                return Err(bad("row length"));
            }
            labels.push(label);
        }
        Self::new(features, vec![width.unwrap_or(0)], labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::Dataset(e.to_string()))?;
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.sample(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::Dataset(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let k = self.sample_len();
        &self.features[i * k..(i + 1) * k]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            features.extend_from_slice(self.sample(i));
        }
        Dataset::new(
            features,
            self.sample_shape.clone(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Deterministic stratified split: within each class, every fifth sample
    /// (by order of appearance) is held out. Returns `(train, heldout)`.
    pub fn holdout_split(&self) -> Result<(Dataset, Dataset)> {
        let mut seen = vec![0usize; self.classes()];
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] % 5 == 4 {
                held.push(i);
            } else {
                train.push(i);
            }
            seen[l] += 1;
        }
        if train.is_empty() || held.is_empty() {
            return Err(Error::Dataset("too few samples for a held-out split".into()));
        }
        Ok((self.subset(&train)?, self.subset(&held)?))
    }

    /// Quantize every sample at the model input scale. `shape` overrides the
    /// sample shape when it has the same element count.
    pub fn to_batch(&self, scale: f64, shape: Option<&[usize]>) -> Result<Batch> {
        let shape = shape.unwrap_or(&self.sample_shape);
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                got: self.sample_shape.clone(),
            });
        }
        Batch::from_features(&self.features, shape, &self.labels, scale)
    }

    /// Two-class synthetic task: features uniform in `[-1, 1]^dim`, labelled
    /// by the sign of a random hyperplane, keeping only samples at least
    /// `margin` away from it.
    pub fn linearly_separable(n: usize, dim: usize, margin: f64, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 || !(0.0..1.0).contains(&margin) {
            return Err(Error::Dataset("invalid synthetic dataset parameters".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v /= norm);
        let (mut features, mut labels) = (Vec::with_capacity(n * dim), Vec::with_capacity(n));
        while labels.len() < n {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            if s.abs() >= margin {
                features.extend(x);
                labels.push(usize::from(s > 0.0));
            }
        }
        Self::new(features, vec![dim], labels)
    }

    /// Samples as separate vectors (calibration input).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.sample(i).to_vec()).collect()
    }
}

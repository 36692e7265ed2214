//! On-disk logit bundles.
//!
//! A bundle is a directory holding three files:
//!
//! - `meta.json`: model/dataset metadata, `format_version` 1
//! - `logits.f32`: `N*K` little-endian IEEE-754 `f32`, row-major
//! - `labels.u32`: `N` little-endian `u32` class indices
//!
//! Loading validates everything and never hands back a partially checked
//! bundle. Saving then loading reproduces the logits byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;
pub const META_FILE: &str = "meta.json";
pub const LOGITS_FILE: &str = "logits.f32";
pub const LABELS_FILE: &str = "labels.u32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// Metadata for one (model, dataset, split). FLOPs and parameter counts are
/// whatever the producer recorded; nothing here estimates them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_name: String,
    pub dataset: String,
    pub split: Split,
    pub num_classes: usize,
    pub num_samples: usize,
    /// FLOPs per forward pass.
    pub flops: f64,
    pub params: u64,
    /// Producer-specific keys (preprocessing, provenance), carried through untouched.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidMeta(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_samples < 1 {
            return Err(Error::InvalidMeta("num_samples must be >= 1".into()));
        }
        if !self.flops.is_finite() || self.flops < 0.0 {
            return Err(Error::InvalidMeta(format!(
                "flops must be finite and non-negative, got {}",
                self.flops
            )));
        }
        if self.extra.contains_key("format_version") {
            return Err(Error::InvalidMeta("format_version is reserved".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct MetaOut<'a> {
    #[serde(flatten)]
    meta: &'a ModelMeta,
    format_version: u64,
}

/// Per-sample logits and labels for one (model, dataset, split).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    meta: ModelMeta,
    logits: Array2<f32>,
    labels: Vec<u32>,
}

impl LogitBundle {
    pub fn new(meta: ModelMeta, logits: Array2<f32>, labels: Vec<u32>) -> Result<Self> {
        meta.validate()?;
        let (n, k) = logits.dim();
        if n != meta.num_samples || k != meta.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "logits are {n}x{k}, meta declares {}x{}",
                meta.num_samples, meta.num_classes
            )));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        for ((row, class), &value) in logits.indexed_iter() {
            if !value.is_finite() {
                return Err(Error::NonFiniteLogit {
                    offset: 4 * (row * k + class) as u64,
                    row,
                    class,
                    value,
                });
            }
        }
        check_labels(&labels, k)?;
        Ok(LogitBundle {
            meta,
            logits,
            labels,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn logits(&self) -> &Array2<f32> {
        &self.logits
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_samples(&self) -> usize {
        self.meta.num_samples
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Logits widened to `f64`, the precision all probability work runs in.
    pub fn logits_f64(&self) -> Array2<f64> {
        self.logits.mapv(f64::from)
    }

    pub fn require_split(&self, expected: Split) -> Result<()> {
        if self.meta.split != expected {
            return Err(Error::SplitMismatch {
                expected,
                found: self.meta.split,
            });
        }
        Ok(())
    }
}

fn check_labels(labels: &[u32], num_classes: usize) -> Result<()> {
    for (row, &label) in labels.iter().enumerate() {
        if label as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                offset: 4 * row as u64,
                row,
                label,
                num_classes,
            });
        }
    }
    Ok(())
}

/// The (large, small) members of a Duo, evaluated on the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BundlePair {
    large: LogitBundle,
    small: LogitBundle,
}

impl BundlePair {
    pub fn new(large: LogitBundle, small: LogitBundle) -> Result<Self> {
        let (lm, sm) = (large.meta(), small.meta());
        if lm.dataset != sm.dataset {
            return Err(Error::PairMismatch(format!(
                "datasets differ: {:?} vs {:?}",
                lm.dataset, sm.dataset
            )));
        }
        if lm.split != sm.split {
            return Err(Error::PairMismatch(format!(
                "splits differ: {} vs {}",
                lm.split, sm.split
            )));
        }
        if lm.num_classes != sm.num_classes || lm.num_samples != sm.num_samples {
            return Err(Error::PairMismatch(format!(
                "shapes differ: {}x{} vs {}x{}",
                lm.num_samples, lm.num_classes, sm.num_samples, sm.num_classes
            )));
        }
        if let Some(row) = large
            .labels()
            .iter()
            .zip(small.labels())
            .position(|(a, b)| a != b)
        {
            return Err(Error::PairMismatch(format!("labels differ at row {row}")));
        }
        if lm.flops < sm.flops {
            return Err(Error::PairMismatch(format!(
                "large member has fewer FLOPs ({}) than small member ({})",
                lm.flops, sm.flops
            )));
        }
        Ok(BundlePair { large, small })
    }

    pub fn large(&self) -> &LogitBundle {
        &self.large
    }

    pub fn small(&self) -> &LogitBundle {
        &self.small
    }

    pub fn labels(&self) -> &[u32] {
        self.large.labels()
    }

    pub fn split(&self) -> Split {
        self.large.meta().split
    }

    pub fn num_samples(&self) -> usize {
        self.large.num_samples()
    }

    pub fn num_classes(&self) -> usize {
        self.large.num_classes()
    }
}

/// FLOPs(small) / FLOPs(large): 0 is a free sidekick, 1 the cost of a
/// two-member ensemble.
pub fn flops_balance(pair: &BundlePair) -> Result<f64> {
    let large = pair.large().meta().flops;
    if large <= 0.0 {
        return Err(Error::UndefinedBalance);
    }
    Ok(pair.small().meta().flops / large)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<LogitBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let logits_path = dir.join(LOGITS_FILE);
    let labels_path = dir.join(LABELS_FILE);
    for p in [&meta_path, &logits_path, &labels_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }

    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&meta_path, &meta_text)?;
    let (n, k) = (meta.num_samples, meta.num_classes);

    let logit_bytes = fs::read(&logits_path).map_err(|e| Error::io(&logits_path, e))?;
    let expected = 4 * (n as u64) * (k as u64);
    if logit_bytes.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            file: logits_path,
            expected,
            actual: logit_bytes.len() as u64,
        });
    }
    let values: Vec<f32> = logit_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let label_bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if label_bytes.len() as u64 != 4 * n as u64 {
        return Err(Error::PayloadSizeMismatch {
            file: labels_path,
            expected: 4 * n as u64,
            actual: label_bytes.len() as u64,
        });
    }
    let labels: Vec<u32> = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let logits =
        Array2::from_shape_vec((n, k), values).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    LogitBundle::new(meta, logits, labels)
}

fn parse_meta(path: &Path, text: &str) -> Result<ModelMeta> {
    let malformed = |message: String| Error::MalformedMeta {
        path: path.to_path_buf(),
        message,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| malformed("top level is not an object".into()))?;
    let version = obj
        .remove("format_version")
        .ok_or_else(|| malformed("missing format_version".into()))?;
    let version = version
        .as_u64()
        .ok_or_else(|| malformed(format!("format_version is not an integer: {version}")))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta: ModelMeta = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    meta.validate()?;
    Ok(meta)
}

pub fn save_bundle(bundle: &LogitBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    // Re-check so a bundle assembled through a future unchecked path still
    // cannot produce an invalid directory.
    let bundle = LogitBundle::new(
        bundle.meta.clone(),
        bundle.logits.clone(),
        bundle.labels.clone(),
    )?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut meta_text = serde_json::to_string_pretty(&MetaOut {
        meta: &bundle.meta,
        format_version: FORMAT_VERSION,
    })
    .expect("metadata serializes");
    meta_text.push('\n');
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;

    let mut logit_bytes = Vec::with_capacity(4 * bundle.logits.len());
    for v in bundle.logits.iter() {
        logit_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let logits_path = dir.join(LOGITS_FILE);
    fs::write(&logits_path, logit_bytes).map_err(|e| Error::io(&logits_path, e))?;

    let mut label_bytes = Vec::with_capacity(4 * bundle.labels.len());
    for l in &bundle.labels {
        label_bytes.extend_from_slice(&l.to_le_bytes());
    }
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, label_bytes).map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

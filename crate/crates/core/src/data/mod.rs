//! Manifest-driven dataset ingestion, grayscale decoding, and stochastic
//! augmentation.

pub mod augment;
pub mod batch;
pub mod image_io;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentationConfig};
pub use batch::{batch_iter, Batch, BatchIter};
pub use image_io::{decode_image, load_sample};

/// Class ids used throughout: the manifest's label column accepts these
/// names or bare integer ids.
pub const CLASS_NAMES: [&str; 3] = ["normal", "covid", "pneumonia"];
pub const NUM_CLASSES: usize = 3;
/// The positive class for headline one-vs-rest metrics.
pub const POSITIVE_CLASS: usize = 1;

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?} (expected train/val/test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest row: where the image lives, its class, its split, and an
/// optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub mask_path: Option<PathBuf>,
    /// Stable per-record id (row order in the manifest).
    pub source: usize,
}

/// A validated dataset manifest. Relative paths resolve against the
/// manifest file's directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    root: PathBuf,
}

impl DatasetManifest {
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Absolute path of a record's image.
    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        resolve(&self.root, &record.path)
    }

    /// Absolute path of a record's mask, when present.
    pub fn mask_path(&self, record: &ManifestRecord) -> Option<PathBuf> {
        record.mask_path.as_ref().map(|p| resolve(&self.root, p))
    }

    /// Check that every referenced file exists.
    pub fn validate_files(&self) -> Result<()> {
        for r in &self.records {
            let img = self.image_path(r);
            if !img.is_file() {
                return Err(Error::Manifest(format!("missing image file {}", img.display())));
            }
            if let Some(mask) = self.mask_path(r) {
                if !mask.is_file() {
                    return Err(Error::Manifest(format!("missing mask file {}", mask.display())));
                }
            }
        }
        Ok(())
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn parse_label(token: &str) -> Result<usize> {
    if let Some(id) = CLASS_NAMES.iter().position(|&n| n == token) {
        return Ok(id);
    }
    match token.parse::<usize>() {
        Ok(id) if id < NUM_CLASSES => Ok(id),
        Ok(id) => Err(Error::Manifest(format!("label id {id} out of range 0..{NUM_CLASSES}"))),
        Err(_) => Err(Error::Manifest(format!(
            "unknown label {token:?} (expected one of {CLASS_NAMES:?} or an id below {NUM_CLASSES})"
        ))),
    }
}

/// Parse and validate a manifest CSV with header `path,label,split,mask_path`.
/// File existence is not checked here; see [`DatasetManifest::validate_files`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = reader.headers()?;
        let expected = ["path", "label", "split", "mask_path"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Manifest(format!("bad header {got:?}, expected {expected:?}")));
        }
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::Manifest(format!("row {}: expected 4 fields, got {}", i + 1, row.len())));
        }
        let image: PathBuf = row[0].into();
        if !seen.insert(image.clone()) {
            return Err(Error::Manifest(format!("duplicate path {:?}", row[0].to_string())));
        }
        let mask = if row[3].is_empty() { None } else { Some(PathBuf::from(&row[3])) };
        records.push(ManifestRecord {
            path: image,
            label: parse_label(&row[1])?,
            split: row[2].parse()?,
            mask_path: mask,
            source: i,
        });
    }
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(DatasetManifest { records, root })
}

/// One decoded example: an image plane in `[0,1]`, its class, and an
/// optional binary mask of the same height and width.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// `1 x H x W` tensor with pixels in `[0,1]`.
    pub image: Tensor<T>,
    pub class: usize,
    /// `H x W` tensor with values in `{0,1}`.
    pub mask: Option<Tensor<T>>,
}

impl<T: Scalar> Sample<T> {
    /// Enforce the pixel-range and mask-shape invariants.
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape("sample", format!("image must be 1 x H x W, got {shape:?}")));
        }
        if !self.image.data().iter().all(|v| *v >= T::zero() && *v <= T::one()) {
            return Err(Error::Config("sample pixels outside [0,1]".into()));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != &shape[1..] {
                return Err(Error::shape(
                    "sample",
                    format!("mask shape {:?} vs image {:?}", mask.shape(), shape),
                ));
            }
            if !mask.data().iter().all(|v| *v == T::zero() || *v == T::one()) {
                return Err(Error::Config("mask values must be 0 or 1".into()));
            }
        }
        Ok(())
    }
}

/// Mix two seeds into one RNG stream id (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

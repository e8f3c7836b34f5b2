//! Samples, datasets and their on-disk layout, augmentation, batching and
//! the synthetic imbalanced dataset generator.

mod augment;
mod batch;
mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{augment, elastic_field, hflip, rot90, AugmentPolicy, DisplacementField};
pub use batch::{epoch_batches, DEFAULT_BATCH_SIZE};
pub use manifest::{load_dataset_dir, load_manifest, AuxCell, DatasetManifest, ManifestRow, AUX_RANGES_FILE};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::model::{AuxKind, AuxValue};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Manifest file name of the split inside a dataset directory.
    pub fn manifest_file(self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split `{s}`")))
    }
}

/// One training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W`, values in `[0,1]`.
    pub image: Tensor,
    pub aux: BTreeMap<AuxKind, AuxValue>,
    pub label: usize,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Validation(format!("sample {}: image shape {s:?} is not 3×H×W", self.id)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("sample {}: image values outside [0,1]", self.id)));
        }
        if self.label >= num_classes {
            return Err(Error::Validation(format!(
                "sample {}: label {} outside [0, {num_classes})",
                self.id, self.label
            )));
        }
        for (kind, v) in &self.aux {
            let ok = match v {
                AuxValue::Scalar(x) => x.is_finite(),
                AuxValue::Raster(t) => t.rank() == 2 && !t.is_empty() && t.is_finite(),
            };
            if !ok {
                return Err(Error::Validation(format!("sample {}: invalid {kind} auxiliary", self.id)));
            }
        }
        Ok(())
    }
}

/// Read-only indexed collection of validated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let mut shape: Option<&[usize]> = None;
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            s.validate(num_classes)?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            match shape {
                None => shape = Some(s.image.shape()),
                Some(expected) if expected != s.image.shape() => {
                    return Err(Error::Validation(format!(
                        "sample {}: image shape {:?} differs from {expected:?}",
                        s.id,
                        s.image.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let d = s.image.shape();
            [d[0], d[1], d[2]]
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Auxiliaries present on every sample, in canonical order.
    pub fn common_aux(&self) -> Vec<AuxKind> {
        AuxKind::CANONICAL
            .into_iter()
            .filter(|k| self.samples.iter().all(|s| s.aux.contains_key(k)))
            .collect()
    }
}

/// The splits of one dataset directory.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

//! Seeded synthetic imbalanced multimodal dataset.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{quantize_image, quantize_raster, write_aux_ranges, write_gray16, write_rgb};
use super::{AuxCell, DataSplits, Dataset, DatasetManifest, ManifestRow, Sample, Split, AUX_RANGES_FILE};
use crate::error::{Error, Result};
use crate::model::{AuxKind, AuxValue};
use crate::numerics::Tensor;
use crate::rng::rng_for;

/// Class names of the default four-class setup, majority class first.
pub const CLASS_NAMES: [&str; 4] = ["plantation", "grassland_shrubland", "smallholder_agriculture", "other"];

const WAVES: usize = 3;
const COLOR_SCALE: f64 = 0.12;
const TEXTURE_SCALE: f64 = 0.08;
const JITTER_SCALE: f64 = 0.10;
const PIXEL_NOISE_SCALE: f64 = 0.05;
const RASTER_NOISE_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub class_proportions: Vec<f64>,
    /// Side length of the square RGB images.
    pub image_size: usize,
    /// Side length of the square auxiliary rasters.
    pub aux_size: usize,
    /// Upper bound of the per-sample class-signal strength, drawn uniformly
    /// from `[0, separation]`.
    pub separation: f64,
    /// One mixing weight per generated auxiliary, in canonical order.
    pub aux_informativeness: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_train: 800,
            num_val: 200,
            num_test: 400,
            class_proportions: vec![0.5, 0.2, 0.2, 0.1],
            image_size: 64,
            aux_size: 16,
            separation: 4.0,
            aux_informativeness: vec![0.8; 4],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.class_proportions.len()
    }

    pub fn aux_kinds(&self) -> &'static [AuxKind] {
        AuxKind::first(self.aux_informativeness.len())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Val => self.num_val,
            Split::Test => self.num_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.class_proportions;
        if p.len() < 2 {
            return Err(Error::config("synthetic.class_proportions", "needs at least two classes"));
        }
        if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(
                format!("synthetic.class_proportions[{i}]"),
                "must be finite and non-negative",
            ));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "synthetic.class_proportions",
                format!("must sum to 1, got {total}"),
            ));
        }
        if self.num_train == 0 {
            return Err(Error::config("synthetic.num_train", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("synthetic.image_size", "must be positive"));
        }
        if self.aux_size == 0 {
            return Err(Error::config("synthetic.aux_size", "must be positive"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::config("synthetic.separation", "must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("synthetic.noise", "must be non-negative"));
        }
        if self.aux_informativeness.len() > AuxKind::CANONICAL.len() {
            return Err(Error::config("synthetic.aux_informativeness", "at most four auxiliaries"));
        }
        if let Some(i) = self.aux_informativeness.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("synthetic.aux_informativeness[{i}]"), "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Per-class counts for `n` samples by largest remainder.
    pub fn class_counts(&self, n: usize) -> Vec<usize> {
        let exact: Vec<f64> = self.class_proportions.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let short = n.saturating_sub(counts.iter().sum());
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &c in order.iter().take(short) {
            counts[c] += 1;
        }
        counts
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: [f64; 3],
}

struct ClassPrototype {
    color: [f64; 3],
    waves: Vec<Wave>,
    /// Per-auxiliary class signal in `[0, 1]`.
    aux: Vec<f64>,
}

fn prototypes(spec: &SyntheticSpec) -> Vec<ClassPrototype> {
    let c = spec.num_classes();
    let mut rng = rng_for(spec.seed, &[0]);
    let mut protos: Vec<ClassPrototype> = (0..c)
        .map(|_| ClassPrototype {
            color: [0; 3].map(|_| rng.gen_range(-1.0..1.0)),
            waves: (0..WAVES)
                .map(|_| Wave {
                    fy: rng.gen_range(1..=4) as f64 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                    fx: rng.gen_range(1..=4) as f64,
                    phase: rng.gen_range(0.0..TAU),
                    amp: [0; 3].map(|_| rng.gen_range(-1.0..1.0)),
                })
                .collect(),
            aux: Vec::new(),
        })
        .collect();
    // Evenly spaced levels, assigned to classes in a different order per auxiliary.
    for _ in spec.aux_kinds() {
        let mut levels: Vec<f64> = (0..c).map(|k| (k as f64 + 0.5) / c as f64).collect();
        levels.shuffle(&mut rng);
        for (p, l) in protos.iter_mut().zip(levels) {
            p.aux.push(l);
        }
    }
    protos
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn sample_id(split: Split, i: usize) -> String {
    format!("{}_{i:05}", split.name())
}

/// Draws one split without quantization.
fn raw_split(spec: &SyntheticSpec, protos: &[ClassPrototype], split: Split) -> Vec<Sample> {
    let n = spec.split_size(split);
    let s = split_index(split);
    let mut labels: Vec<usize> = spec
        .class_counts(n)
        .into_iter()
        .enumerate()
        .flat_map(|(c, k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut rng_for(spec.seed, &[1, s]));

    let size = spec.image_size;
    let inv = 1.0 / size as f64;
    let norm = (WAVES as f64).sqrt();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = rng_for(spec.seed, &[2, s, i as u64]);
            let proto = &protos[label];
            // Per-sample strength of the class signal: weak draws are ambiguous.
            let strength = spec.separation * rng.gen_range(0.0..1.0);
            let jitter: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal));
            let mut image = vec![0.0; 3 * size * size];
            for ch in 0..3 {
                let base = 0.5 + strength * COLOR_SCALE * proto.color[ch] + spec.noise * JITTER_SCALE * jitter[ch];
                for y in 0..size {
                    for x in 0..size {
                        let texture: f64 = proto
                            .waves
                            .iter()
                            .map(|w| w.amp[ch] * (TAU * (w.fy * y as f64 + w.fx * x as f64) * inv + w.phase).sin())
                            .sum::<f64>()
                            / norm;
                        let eps: f64 = rng.sample(StandardNormal);
                        let v = base
                            + strength * TEXTURE_SCALE * texture
                            + spec.noise * PIXEL_NOISE_SCALE * eps;
                        image[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            let mut aux = BTreeMap::new();
            for (a, &kind) in spec.aux_kinds().iter().enumerate() {
                let lambda = spec.aux_informativeness[a];
                let xi = 0.5 + rng.sample::<f64, _>(StandardNormal);
                let level = lambda * proto.aux[a] + (1.0 - lambda) * xi;
                let raster: Vec<f64> = (0..spec.aux_size * spec.aux_size)
                    .map(|_| level + spec.noise * RASTER_NOISE_SCALE * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let raster = Tensor::new(vec![spec.aux_size, spec.aux_size], raster).expect("raster shape");
                aux.insert(kind, AuxValue::Raster(raster));
            }
            Sample {
                id: sample_id(split, i),
                image: Tensor::new(vec![3, size, size], image).expect("image shape"),
                aux,
                label,
            }
        })
        .collect()
}

/// Generates the dataset in memory, rounded exactly as the on-disk formats
/// store it, so `synthesize(spec)` equals loading `generate_synthetic(spec)`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<DataSplits> {
    spec.validate()?;
    let protos = prototypes(spec);
    let build = |split: Split| -> Result<Dataset> {
        let samples = raw_split(spec, &protos, split)
            .into_iter()
            .map(|mut s| {
                s.image = quantize_image(&s.image);
                for v in s.aux.values_mut() {
                    if let AuxValue::Raster(t) = v {
                        *t = quantize_raster(t);
                    }
                }
                s
            })
            .collect();
        Dataset::new(samples, spec.num_classes())
    };
    let optional = |split: Split| -> Result<Option<Dataset>> {
        if spec.split_size(split) == 0 {
            Ok(None)
        } else {
            build(split).map(Some)
        }
    };
    Ok(DataSplits {
        train: build(Split::Train)?,
        val: optional(Split::Val)?,
        test: optional(Split::Test)?,
    })
}

/// Writes the dataset under `out` and returns one manifest per non-empty split.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Vec<DatasetManifest>> {
    spec.validate()?;
    for dir in [out.to_path_buf(), out.join("images"), out.join("aux")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let protos = prototypes(spec);
    let mut ranges = Vec::new();
    let mut manifests = Vec::new();
    for split in Split::ALL {
        if spec.split_size(split) == 0 {
            continue;
        }
        let mut rows = Vec::new();
        for sample in raw_split(spec, &protos, split) {
            let image = format!("images/{}.png", sample.id);
            write_rgb(&out.join(&image), &sample.image)?;
            let mut aux = BTreeMap::new();
            for (kind, value) in &sample.aux {
                let cell = match value {
                    AuxValue::Raster(t) => {
                        let file = format!("aux/{}_{kind}.png", sample.id);
                        let (lo, hi) = write_gray16(&out.join(&file), t)?;
                        ranges.push((file.clone(), lo, hi));
                        AuxCell::File(file)
                    }
                    AuxValue::Scalar(v) => AuxCell::Value(*v),
                };
                aux.insert(*kind, cell);
            }
            rows.push(ManifestRow {
                sample_id: sample.id,
                image,
                label: sample.label,
                aux,
            });
        }
        let manifest = DatasetManifest {
            root: out.to_path_buf(),
            split,
            rows,
        };
        manifest.write()?;
        manifests.push(manifest);
    }
    write_aux_ranges(&out.join(AUX_RANGES_FILE), &ranges)?;
    Ok(manifests)
}

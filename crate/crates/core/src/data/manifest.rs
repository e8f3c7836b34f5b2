//! CSV manifests, PNG images and 16-bit auxiliary rasters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{DataSplits, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{AuxKind, AuxValue};
use crate::numerics::Tensor;

pub const AUX_RANGES_FILE: &str = "aux_ranges.csv";

const U16_MAX: f64 = 65535.0;

/// An auxiliary cell of a manifest row.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxCell {
    /// Path of a 16-bit raster relative to the manifest directory.
    File(String),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub image: String,
    pub label: usize,
    pub aux: BTreeMap<AuxKind, AuxCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(self.split.manifest_file())
    }

    pub fn write(&self) -> Result<()> {
        let path = self.path();
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut header = vec!["sample_id", "image", "label"];
        header.extend(AuxKind::CANONICAL.iter().map(|k| k.name()));
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for row in &self.rows {
            let mut rec = vec![row.sample_id.clone(), row.image.clone(), row.label.to_string()];
            for kind in AuxKind::CANONICAL {
                rec.push(match row.aux.get(&kind) {
                    None => String::new(),
                    Some(AuxCell::File(f)) => f.clone(),
                    Some(AuxCell::Value(v)) => format!("{v}"),
                });
            }
            w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Reads a manifest without touching the files it references.
    pub fn read(path: &Path) -> Result<Self> {
        let file_name = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        let split = Split::ALL
            .into_iter()
            .find(|s| s.manifest_file() == file_name)
            .unwrap_or(Split::Train);
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(text.as_slice());
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        let expected: Vec<&str> = ["sample_id", "image", "label"]
            .into_iter()
            .chain(AuxKind::CANONICAL.iter().map(|k| k.name()))
            .collect();
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::Validation(format!(
                "{}: header must be `{}`",
                path.display(),
                expected.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let row_no = i + 1;
            let rec = rec.map_err(|e| Error::Validation(format!("{} row {row_no}: {e}", path.display())))?;
            let at = |msg: String| Error::Validation(format!("{} row {row_no} ({}): {msg}", path.display(), &rec[0]));
            let label = rec[2]
                .trim()
                .parse::<usize>()
                .map_err(|_| at(format!("label `{}` is not a class index", &rec[2])))?;
            let mut aux = BTreeMap::new();
            for (k, kind) in AuxKind::CANONICAL.into_iter().enumerate() {
                let cell = rec[3 + k].trim();
                if cell.is_empty() {
                    continue;
                }
                let value = match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => AuxCell::Value(v),
                    Ok(_) => return Err(at(format!("{kind} value `{cell}` is not finite"))),
                    Err(_) => AuxCell::File(cell.to_string()),
                };
                aux.insert(kind, value);
            }
            rows.push(ManifestRow {
                sample_id: rec[0].to_string(),
                image: rec[1].to_string(),
                label,
                aux,
            });
        }
        Ok(DatasetManifest { root, split, rows })
    }

    /// Decodes and validates every row.
    pub fn load(&self, num_classes: usize) -> Result<Dataset> {
        let manifest = self.path();
        let needs_ranges = self
            .rows
            .iter()
            .any(|r| r.aux.values().any(|c| matches!(c, AuxCell::File(_))));
        let ranges = if needs_ranges {
            read_aux_ranges(&self.root.join(AUX_RANGES_FILE))?
        } else {
            HashMap::new()
        };
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let at = |msg: String| {
                Error::Validation(format!("{} row {} ({}): {msg}", manifest.display(), i + 1, row.sample_id))
            };
            if !seen.insert(row.sample_id.as_str()) {
                return Err(at("duplicate sample_id".into()));
            }
            if row.label >= num_classes {
                return Err(at(format!("label {} outside [0, {num_classes})", row.label)));
            }
            let image_path = self.root.join(&row.image);
            let image = read_rgb(&image_path).map_err(|e| at(e.to_string()))?;
            let mut aux = BTreeMap::new();
            for (&kind, cell) in &row.aux {
                let value = match cell {
                    AuxCell::Value(v) => AuxValue::Scalar(*v),
                    AuxCell::File(f) => {
                        let &(lo, hi) = ranges
                            .get(f.as_str())
                            .ok_or_else(|| at(format!("no entry for `{f}` in {AUX_RANGES_FILE}")))?;
                        AuxValue::Raster(read_gray16(&self.root.join(f), lo, hi).map_err(|e| at(e.to_string()))?)
                    }
                };
                aux.insert(kind, value);
            }
            let sample = Sample {
                id: row.sample_id.clone(),
                image,
                aux,
                label: row.label,
            };
            sample.validate(num_classes).map_err(|e| at(e.to_string()))?;
            samples.push(sample);
        }
        Dataset::new(samples, num_classes)
    }
}

/// Loads and validates the manifest at `path`.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Validation(format!("manifest {} does not exist", path.display())));
    }
    DatasetManifest::read(path)?.load(num_classes)
}

/// Loads `train.csv` and, when present, `val.csv` and `test.csv`.
pub fn load_dataset_dir(dir: &Path, num_classes: usize) -> Result<DataSplits> {
    let optional = |split: Split| -> Result<Option<Dataset>> {
        let path = dir.join(split.manifest_file());
        if path.is_file() {
            load_manifest(&path, num_classes).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(DataSplits {
        train: load_manifest(&dir.join(Split::Train.manifest_file()), num_classes)?,
        val: optional(Split::Val)?,
        test: optional(Split::Test)?,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

pub(crate) fn read_aux_ranges(path: &Path) -> Result<HashMap<String, (f64, f64)>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = || Error::Validation(format!("{} row {}: expected file,min,max", path.display(), i + 1));
        if rec.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = rec[1].trim().parse().map_err(|_| bad())?;
        let hi: f64 = rec[2].trim().parse().map_err(|_| bad())?;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(bad());
        }
        out.insert(rec[0].to_string(), (lo, hi));
    }
    Ok(out)
}

pub(crate) fn write_aux_ranges(path: &Path, ranges: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["file", "min", "max"]).map_err(|e| csv_error(path, e))?;
    for (file, lo, hi) in ranges {
        w.write_record([file.clone(), format!("{lo}"), format!("{hi}")])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn dequantize_u8(q: u8) -> f64 {
    f64::from(q) / 255.0
}

/// Per-raster value range used for 16-bit quantization.
pub(crate) fn raster_range(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub(crate) fn quantize_u16(v: f64, lo: f64, hi: f64) -> u16 {
    if hi > lo {
        (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * U16_MAX).round() as u16
    } else {
        0
    }
}

pub(crate) fn dequantize_u16(q: u16, lo: f64, hi: f64) -> f64 {
    lo + f64::from(q) / U16_MAX * (hi - lo)
}

/// Rounds an image to what an 8-bit PNG stores.
pub(crate) fn quantize_image(t: &Tensor) -> Tensor {
    t.map(|v| dequantize_u8(quantize_u8(v)))
}

/// Rounds a raster to what a 16-bit PNG stores under its own range.
pub(crate) fn quantize_raster(t: &Tensor) -> Tensor {
    let (lo, hi) = raster_range(t.data());
    t.map(|v| dequantize_u16(quantize_u16(v, lo, hi), lo, hi))
}

pub(crate) fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    debug_assert_eq!(c, 3);
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|ch| quantize_u8(d[(ch * h + y) * w + x])))
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub(crate) fn read_rgb(path: &Path) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::Validation(format!("image file {} does not exist", path.display())));
    }
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = dequantize_u8(px[ch]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a raster as 16-bit grayscale and returns its `(min, max)`.
pub(crate) fn write_gray16(path: &Path, raster: &Tensor) -> Result<(f64, f64)> {
    let (h, w) = (raster.shape()[0], raster.shape()[1]);
    let (lo, hi) = raster_range(raster.data());
    let d = raster.data();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize_u16(d[y as usize * w + x as usize], lo, hi)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))?;
    Ok((lo, hi))
}

pub(crate) fn read_gray16(path: &Path, lo: f64, hi: f64) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::Validation(format!("auxiliary file {} does not exist", path.display())));
    }
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| dequantize_u16(p[0], lo, hi)).collect();
    Tensor::new(vec![h, w], data)
}

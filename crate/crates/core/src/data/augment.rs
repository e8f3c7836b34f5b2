//! Joint geometric augmentation of an image and its raster auxiliaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::model::AuxValue;
use crate::numerics::Tensor;
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    /// Rotate by a uniformly drawn multiple of 90 degrees.
    pub rotate: bool,
    pub elastic_p: f64,
    /// Largest displacement of the elastic field, in image pixels.
    pub elastic_sigma: f64,
    /// Box-blur radius smoothing the elastic field, in image pixels.
    pub elastic_radius: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_p: 0.5,
            rotate: true,
            elastic_p: 0.5,
            elastic_sigma: 2.0,
            elastic_radius: 8,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every sample unchanged.
    pub fn none() -> Self {
        AugmentPolicy {
            hflip_p: 0.0,
            rotate: false,
            elastic_p: 0.0,
            elastic_sigma: 0.0,
            elastic_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (path, p) in [("train.augment.hflip_p", self.hflip_p), ("train.augment.elastic_p", self.elastic_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(path, "must lie in [0, 1]"));
            }
        }
        if !(self.elastic_sigma.is_finite() && self.elastic_sigma >= 0.0) {
            return Err(Error::config("train.augment.elastic_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Spatial layout of a tensor: leading planes of `h×w`.
fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected an h×w or c×h×w tensor, got {s:?}"))),
    }
}

fn with_planes(t: &Tensor, c: usize, h: usize, w: usize) -> Vec<usize> {
    if t.rank() == 2 {
        vec![h, w]
    } else {
        vec![c, h, w]
    }
}

/// Mirrors the last axis.
pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = planes(t)?;
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for row in d.chunks(w).take(c * h) {
        out.extend(row.iter().rev());
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Rotates each plane counter-clockwise by `k` quarter turns; odd `k` swaps
/// height and width.
pub fn rot90(t: &Tensor, k: usize) -> Result<Tensor> {
    let (c, mut h, mut w) = planes(t)?;
    let mut cur = t.data().to_vec();
    for _ in 0..k % 4 {
        let mut next = vec![0.0; cur.len()];
        for p in 0..c {
            let src = &cur[p * h * w..(p + 1) * h * w];
            let dst = &mut next[p * h * w..(p + 1) * h * w];
            // out is w×h: out[i][j] = in[j][w-1-i]
            for i in 0..w {
                for j in 0..h {
                    dst[i * h + j] = src[j * w + (w - 1 - i)];
                }
            }
        }
        cur = next;
        std::mem::swap(&mut h, &mut w);
    }
    Tensor::new(with_planes(t, c, h, w), cur)
}

/// Smooth displacement field over an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub h: usize,
    pub w: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

fn box_blur(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return v.to_vec();
    }
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let (pos, len) = if along_rows { (j, w) } else { (i, h) };
                let (lo, hi) = (pos.saturating_sub(r), (pos + r).min(len - 1));
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if along_rows { src[i * w + q] } else { src[q * w + j] };
                }
                out[i * w + j] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

/// Draws uniform noise, smooths it with a box blur of radius `radius` and
/// rescales so the largest component equals `sigma`.
pub fn elastic_field<R: Rng>(h: usize, w: usize, sigma: f64, radius: usize, rng: &mut R) -> DisplacementField {
    let mut draw = || -> Vec<f64> {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        box_blur(&noise, h, w, radius)
    };
    let (mut dy, mut dx) = (draw(), draw());
    let peak = dy.iter().chain(&dx).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { sigma / peak } else { 0.0 };
    dy.iter_mut().chain(dx.iter_mut()).for_each(|v| *v *= scale);
    DisplacementField { h, w, dy, dx }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return plane[y0 * w + x0];
    }
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

impl DisplacementField {
    /// Warps every plane of `t`. Tensors on a different grid sample the field
    /// at corresponding positions, with displacements rescaled to their size.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = planes(t)?;
        let (sy, sx) = (self.h as f64 / h as f64, self.w as f64 / w as f64);
        let mut disp = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (fy, fx) = ((i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5);
                let (dy, dx) = if sy == 1.0 && sx == 1.0 {
                    (self.dy[i * w + j], self.dx[i * w + j])
                } else {
                    (
                        bilinear(&self.dy, self.h, self.w, fy, fx) / sy,
                        bilinear(&self.dx, self.h, self.w, fy, fx) / sx,
                    )
                };
                disp.push((i as f64 + dy, j as f64 + dx));
            }
        }
        let d = t.data();
        let mut out = Vec::with_capacity(d.len());
        for p in 0..c {
            let plane = &d[p * h * w..(p + 1) * h * w];
            out.extend(disp.iter().map(|&(y, x)| bilinear(plane, h, w, y, x)));
        }
        Tensor::new(t.shape().to_vec(), out)
    }
}

fn map_geometry(sample: &Sample, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Sample> {
    let mut out = sample.clone();
    out.image = f(&sample.image)?;
    for v in out.aux.values_mut() {
        if let AuxValue::Raster(r) = v {
            *r = f(r)?;
        }
    }
    Ok(out)
}

/// Applies a random flip, quarter-turn rotation and elastic warp, drawn
/// from `seed`, identically to the image and every raster auxiliary.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, seed: u64) -> Result<Sample> {
    let mut rng = rng_for(seed, &[]);
    let flip = rng.gen_bool(policy.hflip_p);
    let k = if policy.rotate { rng.gen_range(0..4usize) } else { 0 };
    let elastic = rng.gen_bool(policy.elastic_p);

    let mut out = if flip { map_geometry(sample, hflip)? } else { sample.clone() };
    if k != 0 {
        out = map_geometry(&out, |t| rot90(t, k))?;
    }
    if elastic && policy.elastic_sigma > 0.0 {
        let s = out.image.shape();
        let field = elastic_field(s[1], s[2], policy.elastic_sigma, policy.elastic_radius, &mut rng);
        out = map_geometry(&out, |t| field.apply(t))?;
    }
    Ok(out)
}

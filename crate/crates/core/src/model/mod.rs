//! Network components: image encoder, projection head, auxiliary
//! featurizer, fusion and the MLP classifier.
//!
//! Parameters live in a single [`ModelParams`] map keyed by
//! `"<group>/<layer>.<w|b>"`. The forward functions take a [`Bound`] view
//! that maps those names to graph nodes, so the same parameters can be
//! attached to many graphs (one per sample, or one per batch).

mod checkpoint;
mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Bound, Group, ModelParams};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Auxiliary modalities in canonical fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    Slope,
    Altitude,
    Aspect,
    Gain,
}

impl AuxKind {
    pub const CANONICAL: [AuxKind; 4] = [AuxKind::Slope, AuxKind::Altitude, AuxKind::Aspect, AuxKind::Gain];

    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Slope => "slope",
            AuxKind::Altitude => "altitude",
            AuxKind::Aspect => "aspect",
            AuxKind::Gain => "gain",
        }
    }

    /// The first `n` auxiliaries in canonical order.
    pub fn first(n: usize) -> &'static [AuxKind] {
        &Self::CANONICAL[..n.min(4)]
    }
}

impl fmt::Display for AuxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AuxKind::CANONICAL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown auxiliary `{s}`")))
    }
}

/// An auxiliary input: a raster or a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxValue {
    Raster(Tensor),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SmallCnn,
    Mlp,
}

/// Channel widths of the three stride-2 convolution blocks.
pub const CNN_CHANNELS: [usize; 3] = [8, 16, 32];

/// Subtracted from every pixel before the encoder sees it.
pub const INPUT_CENTER: f64 = 0.5;

/// Number of summary statistics extracted from each auxiliary.
pub const AUX_STATS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// Channels, height, width.
    pub image_shape: [usize; 3],
    pub rep_dim: usize,
    /// Hidden width of the `mlp` encoder.
    pub mlp_hidden: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Width of each auxiliary's feature vector.
    pub aux_feature_dim: usize,
    /// Whether a trainable dense layer follows the summary statistics.
    pub aux_dense: bool,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub num_aux: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::SmallCnn,
            image_shape: [3, 64, 64],
            rep_dim: 48,
            mlp_hidden: 128,
            proj_hidden: 64,
            proj_out: 32,
            aux_feature_dim: AUX_STATS,
            aux_dense: true,
            classifier_hidden: vec![256, 128],
            num_classes: 4,
            num_aux: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.model.rep_dim", self.rep_dim),
            ("train.model.proj_hidden", self.proj_hidden),
            ("train.model.proj_out", self.proj_out),
            ("train.model.aux_feature_dim", self.aux_feature_dim),
            ("train.model.num_classes", self.num_classes),
            ("train.model.mlp_hidden", self.mlp_hidden),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.image_shape.contains(&0) {
            return Err(Error::config("train.model.image_shape", "dimensions must be positive"));
        }
        if self.proj_out > self.proj_hidden {
            return Err(Error::config("train.model.proj_out", "must not exceed proj_hidden"));
        }
        if ![0, 1, 2, 4].contains(&self.num_aux) {
            return Err(Error::config("train.model.num_aux", format!("must be 0, 1, 2 or 4, got {}", self.num_aux)));
        }
        if !self.aux_dense && self.aux_feature_dim != AUX_STATS {
            return Err(Error::config(
                "train.model.aux_feature_dim",
                format!("must be {AUX_STATS} when aux_dense is false"),
            ));
        }
        if self.classifier_hidden.contains(&0) {
            return Err(Error::config("train.model.classifier_hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn classifier_input_dim(&self) -> usize {
        self.rep_dim + self.num_aux * self.aux_feature_dim
    }

    pub fn aux_kinds(&self) -> &'static [AuxKind] {
        AuxKind::first(self.num_aux)
    }

    /// Recovers the architecture from parameter shapes. The image shape
    /// cannot be inferred for the convolutional encoder, so it is taken from
    /// `image_shape` when given (and required to match for the MLP encoder).
    pub fn infer(params: &ModelParams, image_shape: Option<[usize; 3]>) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            params
                .get(name)
                .map(Tensor::shape)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
        };
        let (encoder_kind, rep_dim, mlp_hidden, inferred_image) = if params.get("encoder/conv1.w").is_some() {
            let fc = shape("encoder/fc.w")?;
            (EncoderKind::SmallCnn, fc[1], ModelConfig::default().mlp_hidden, None)
        } else {
            let fc1 = shape("encoder/fc1.w")?;
            let fc2 = shape("encoder/fc2.w")?;
            let side = ((fc1[0] / 3) as f64).sqrt().round() as usize;
            (EncoderKind::Mlp, fc2[1], fc1[1], Some([3, side, side]))
        };
        let image_shape = match (image_shape, inferred_image) {
            (Some(given), Some(inferred)) if given[0] * given[1] * given[2] != inferred[0] * inferred[1] * inferred[2] => {
                return Err(Error::config(
                    "train.model.image_shape",
                    format!("checkpoint expects {inferred:?}, data has {given:?}"),
                ))
            }
            (Some(given), _) => given,
            (None, Some(inferred)) => inferred,
            (None, None) => ModelConfig::default().image_shape,
        };
        let p1 = shape("projection/fc1.w")?;
        let p2 = shape("projection/fc2.w")?;

        let mut classifier_hidden = Vec::new();
        let mut layer = 1;
        while let Some(w) = params.get(&format!("classifier/fc{layer}.w")) {
            classifier_hidden.push(w.shape()[1]);
            layer += 1;
        }
        let out = shape("classifier/out.w")?;
        let cls_in = match classifier_hidden.is_empty() {
            true => out[0],
            false => shape("classifier/fc1.w")?[0],
        };

        let aux_layers: Vec<&[usize]> = AuxKind::CANONICAL
            .iter()
            .filter_map(|a| params.get(&format!("aux_featurizer/{}.w", a.name())).map(Tensor::shape))
            .collect();
        let (aux_dense, aux_feature_dim, num_aux) = if let Some(first) = aux_layers.first() {
            (true, first[1], aux_layers.len())
        } else {
            let extra = cls_in.checked_sub(rep_dim).ok_or_else(|| {
                Error::Format("classifier input narrower than the representation".into())
            })?;
            (false, AUX_STATS, extra / AUX_STATS)
        };

        let cfg = ModelConfig {
            encoder_kind,
            image_shape,
            rep_dim,
            mlp_hidden,
            proj_hidden: p1[1],
            proj_out: p2[1],
            aux_feature_dim,
            aux_dense,
            classifier_hidden,
            num_classes: out[1],
            num_aux,
        };
        cfg.validate()?;
        if cfg.classifier_input_dim() != cls_in {
            return Err(Error::Format(format!(
                "classifier input {cls_in} inconsistent with rep_dim {rep_dim} and {num_aux} auxiliaries"
            )));
        }
        Ok(cfg)
    }
}

/// Parameter names and shapes for a configuration, in initialization order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let dense = |out: &mut Vec<(String, Vec<usize>)>, name: String, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o]));
        out.push((format!("{name}.b"), vec![o]));
    };
    match cfg.encoder_kind {
        EncoderKind::SmallCnn => {
            let mut cin = cfg.image_shape[0];
            for (i, &c) in CNN_CHANNELS.iter().enumerate() {
                out.push((format!("encoder/conv{}.w", i + 1), vec![c, cin, 3, 3]));
                out.push((format!("encoder/conv{}.b", i + 1), vec![c]));
                cin = c;
            }
            dense(&mut out, "encoder/fc".into(), cin, cfg.rep_dim);
        }
        EncoderKind::Mlp => {
            let flat = cfg.image_shape.iter().product();
            dense(&mut out, "encoder/fc1".into(), flat, cfg.mlp_hidden);
            dense(&mut out, "encoder/fc2".into(), cfg.mlp_hidden, cfg.rep_dim);
        }
    }
    dense(&mut out, "projection/fc1".into(), cfg.rep_dim, cfg.proj_hidden);
    dense(&mut out, "projection/fc2".into(), cfg.proj_hidden, cfg.proj_out);
    if cfg.aux_dense {
        for a in cfg.aux_kinds() {
            dense(&mut out, format!("aux_featurizer/{}", a.name()), AUX_STATS, cfg.aux_feature_dim);
        }
    }
    let mut width = cfg.classifier_input_dim();
    for (i, &h) in cfg.classifier_hidden.iter().enumerate() {
        dense(&mut out, format!("classifier/fc{}", i + 1), width, h);
        width = h;
    }
    dense(&mut out, "classifier/out".into(), width, cfg.num_classes);
    out
}

/// Mean, standard deviation, minimum and maximum of an auxiliary. A scalar
/// `v` maps to `(v, 0, v, v)`.
pub fn aux_stats(aux: &AuxValue) -> Result<[f64; AUX_STATS]> {
    match aux {
        AuxValue::Scalar(v) => {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite auxiliary scalar".into()));
            }
            Ok([*v, 0.0, *v, *v])
        }
        AuxValue::Raster(t) => {
            if t.is_empty() {
                return Err(Error::Shape("empty auxiliary raster".into()));
            }
            if !t.is_finite() {
                return Err(Error::Validation("non-finite auxiliary raster".into()));
            }
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
            let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok([mean, var.sqrt(), min, max])
        }
    }
}

/// Dense layer `x·W + b` on a vector or on the rows of a matrix.
fn dense(g: &mut Graph, b: &Bound, x: NodeId, layer: &str) -> Result<NodeId> {
    let w = b.node(&format!("{layer}.w"))?;
    let bias = b.node(&format!("{layer}.b"))?;
    let xv = g.value(x);
    let expected = g.value(w).shape()[0];
    if *xv.shape().last().unwrap_or(&0) != expected || xv.rank() == 0 || xv.rank() > 2 {
        return Err(Error::Shape(format!(
            "{layer}: input {:?} does not match weight {:?}",
            xv.shape(),
            g.value(w).shape()
        )));
    }
    if xv.rank() == 1 {
        let row = g.reshape(x, &[1, expected])?;
        let y = g.matmul(row, w)?;
        let y = g.add_row_bias(y, bias)?;
        let width = g.value(y).shape()[1];
        g.reshape(y, &[width])
    } else {
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, bias)
    }
}

/// Forward passes of the network components for one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Image (`C×H×W`) to representation (`rep_dim`).
    pub fn encoder_forward(&self, g: &mut Graph, b: &Bound, image: NodeId) -> Result<NodeId> {
        let shape = g.value(image).shape();
        if shape != self.cfg.image_shape {
            return Err(Error::Shape(format!(
                "image shape {shape:?} does not match configured {:?}",
                self.cfg.image_shape
            )));
        }
        let image = g.affine(image, 1.0, -INPUT_CENTER);
        match self.cfg.encoder_kind {
            EncoderKind::SmallCnn => {
                let mut x = image;
                for i in 1..=CNN_CHANNELS.len() {
                    let k = b.node(&format!("encoder/conv{i}.w"))?;
                    let bias = b.node(&format!("encoder/conv{i}.b"))?;
                    x = g.conv2d(x, k, 2, 1)?;
                    x = g.add_channel_bias(x, bias)?;
                    x = g.relu(x);
                }
                let pooled = g.global_avg_pool(x)?;
                dense(g, b, pooled, "encoder/fc")
            }
            EncoderKind::Mlp => {
                let flat = g.reshape(image, &[self.cfg.image_shape.iter().product()])?;
                let h = dense(g, b, flat, "encoder/fc1")?;
                let h = g.relu(h);
                dense(g, b, h, "encoder/fc2")
            }
        }
    }

    /// Representation(s) to unit-norm embedding(s). Accepts a vector or an
    /// `N×rep_dim` matrix.
    pub fn projection_forward(&self, g: &mut Graph, b: &Bound, rep: NodeId) -> Result<NodeId> {
        let h = dense(g, b, rep, "projection/fc1")?;
        let h = g.relu(h);
        let z = dense(g, b, h, "projection/fc2")?;
        g.l2_normalize(z)
    }

    /// Summary statistics (a `4` vector or `N×4` matrix) to the feature
    /// vector of one auxiliary. Without a dense layer this is the identity.
    pub fn aux_featurize(&self, g: &mut Graph, b: &Bound, aux: AuxKind, stats: NodeId) -> Result<NodeId> {
        if !self.cfg.aux_kinds().contains(&aux) {
            return Err(Error::config("train.model.num_aux", format!("auxiliary `{aux}` is not enabled")));
        }
        if self.cfg.aux_dense {
            dense(g, b, stats, &format!("aux_featurizer/{}", aux.name()))
        } else {
            Ok(stats)
        }
    }

    /// Concatenates the representation with the auxiliary features, in
    /// canonical auxiliary order.
    pub fn fuse(&self, g: &mut Graph, rep: NodeId, aux_features: &[NodeId]) -> Result<NodeId> {
        if aux_features.len() != self.cfg.num_aux {
            return Err(Error::config(
                "train.model.num_aux",
                format!("expected {} auxiliary features, got {}", self.cfg.num_aux, aux_features.len()),
            ));
        }
        let mut fused = rep;
        for &a in aux_features {
            fused = g.concat(fused, a)?;
        }
        Ok(fused)
    }

    /// Fused input to class log-probabilities.
    pub fn classifier_log_probs(&self, g: &mut Graph, b: &Bound, fused: NodeId) -> Result<NodeId> {
        let mut h = fused;
        for i in 1..=self.cfg.classifier_hidden.len() {
            h = dense(g, b, h, &format!("classifier/fc{i}"))?;
            h = g.relu(h);
        }
        let logits = dense(g, b, h, "classifier/out")?;
        g.log_softmax(logits)
    }

    /// Fused input to class probabilities.
    pub fn classifier_forward(&self, g: &mut Graph, b: &Bound, fused: NodeId) -> Result<NodeId> {
        let lp = self.classifier_log_probs(g, b, fused)?;
        Ok(g.exp(lp))
    }
}

/// Stacked per-auxiliary statistics for a batch, keyed by auxiliary.
pub type AuxStatsBatch = BTreeMap<AuxKind, Tensor>;

//! Forward passes over whole datasets with no augmentation and no tape
//! kept for parameters.

use rayon::prelude::*;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{aux_stats, AuxKind, AuxStatsBatch, Group, Model, ModelParams, AUX_STATS};
use crate::numerics::{Graph, Tensor};

/// Representation of one image.
pub fn encode(model: &Model, params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, &[Group::Encoder], false);
    let x = g.constant(image.clone());
    let rep = model.encoder_forward(&mut g, &b, x)?;
    Ok(g.value(rep).clone())
}

fn stack(rows: Vec<Tensor>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = rows.into_iter().map(Tensor::into_data).collect();
    Tensor::from_rows(&rows)
}

/// `N×rep_dim` representations of `samples`, computed in parallel and
/// stacked in input order.
pub fn representations(model: &Model, params: &ModelParams, samples: &[&Sample]) -> Result<Tensor> {
    let reps = samples
        .par_iter()
        .map(|s| encode(model, params, &s.image))
        .collect::<Result<Vec<_>>>()?;
    stack(reps)
}

fn all(data: &Dataset) -> Vec<&Sample> {
    data.samples().iter().collect()
}

/// Unit-norm projected embeddings of every sample, in dataset order.
pub fn embeddings(model: &Model, params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let reps = representations(model, params, &all(data))?;
    project(model, params, &reps)
}

/// Projection head applied to the rows of `reps`.
pub fn project(model: &Model, params: &ModelParams, reps: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, &[Group::Projection], false);
    let r = g.constant(reps.clone());
    let z = model.projection_forward(&mut g, &b, r)?;
    Ok(g.value(z).clone())
}

/// Per-auxiliary `N×4` summary statistics for `kinds`.
pub fn aux_stats_batch(samples: &[&Sample], kinds: &[AuxKind]) -> Result<AuxStatsBatch> {
    let mut out = AuxStatsBatch::new();
    for &kind in kinds {
        let mut data = Vec::with_capacity(samples.len() * AUX_STATS);
        for s in samples {
            let v = s.aux.get(&kind).ok_or_else(|| {
                Error::config("train.model.num_aux", format!("sample {} has no `{kind}` auxiliary", s.id))
            })?;
            data.extend(aux_stats(v)?);
        }
        out.insert(kind, Tensor::new(vec![samples.len(), AUX_STATS], data)?);
    }
    Ok(out)
}

/// Class log-probabilities for precomputed representations and statistics.
pub fn class_log_probs(model: &Model, params: &ModelParams, reps: &Tensor, stats: &AuxStatsBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, &[Group::AuxFeaturizer, Group::Classifier], false);
    let r = g.constant(reps.clone());
    let mut feats = Vec::new();
    for &kind in model.config().aux_kinds() {
        let st = stats
            .get(&kind)
            .ok_or_else(|| Error::config("train.model.num_aux", format!("missing `{kind}` statistics")))?;
        let s = g.constant(st.clone());
        feats.push(model.aux_featurize(&mut g, &b, kind, s)?);
    }
    let fused = model.fuse(&mut g, r, &feats)?;
    let lp = model.classifier_log_probs(&mut g, &b, fused)?;
    Ok(g.value(lp).clone())
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Log-probabilities for every sample of `data`.
pub fn predict_log_probs(model: &Model, params: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let samples = all(data);
    let reps = representations(model, params, &samples)?;
    let stats = aux_stats_batch(&samples, model.config().aux_kinds())?;
    class_log_probs(model, params, &reps, &stats)
}

/// Arg-max class of every sample of `data`.
pub fn predict(model: &Model, params: &ModelParams, data: &Dataset) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_log_probs(model, params, data)?))
}

//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the whole forward graph for every perturbed input,
//! so it shares no code with the backward rules it verifies.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used by the central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Lower bound on the denominator of the relative error. Without it,
/// gradients that are exactly zero analytically would be compared against
/// pure floating-point roundoff of the difference quotient.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink or a clamp.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of the scalar returned by `f` with
/// central differences in every coordinate of every input.
///
/// `f` receives a fresh graph and one parameter node per input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let coords = inputs.iter().enumerate().flat_map(|(t, x)| (0..x.len()).map(move |k| (t, k))).collect();
    check_coordinates(inputs, step, coords, f)
}

/// Like [`check_gradients`], but compares at most `per_input` coordinates of
/// each input, drawn without replacement from `rng`.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor],
    step: f64,
    per_input: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut coords = Vec::new();
    for (t, x) in inputs.iter().enumerate() {
        let mut ks = sample(rng, x.len(), per_input.min(x.len())).into_vec();
        ks.sort_unstable();
        coords.extend(ks.into_iter().map(|k| (t, k)));
    }
    check_coordinates(inputs, step, coords, f)
}

fn check_coordinates<F>(inputs: &[Tensor], step: f64, coords: Vec<(usize, usize)>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Usage("gradient check needs a scalar function".into()));
        }
        Ok((g, ids, out))
    };

    let (graph, ids, out) = eval(inputs)?;
    let grads = graph.backward(out)?;
    let signature = graph.kink_signature();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get(id).cloned().expect("param gradient"))
        .collect();
    drop(graph);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (t, k) in coords {
        let orig = inputs[t].data()[k];

        work[t].data_mut()[k] = orig + step;
        let (gp, _, op) = eval(&work)?;
        let plus = gp.value(op).item();
        let same_plus = gp.kink_signature() == signature;
        drop(gp);

        work[t].data_mut()[k] = orig - step;
        let (gm, _, om) = eval(&work)?;
        let minus = gm.value(om).item();
        let same_minus = gm.kink_signature() == signature;
        drop(gm);

        work[t].data_mut()[k] = orig;
        if !(same_plus && same_minus) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[t].data()[k], numeric);
        if !err.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient comparison at input {t}, index {k}"
            )));
        }
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

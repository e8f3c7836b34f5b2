//! Training objectives: supervised contrastive loss over unit-norm
//! embeddings, and focal loss over class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Floor applied to the ground-truth probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-15;

/// Tolerance on the unit norm of contrastive embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Focal balancing weight per ground-truth class. A single entry (or a
    /// bare number in JSON) applies to every class.
    #[serde(deserialize_with = "scalar_or_list")]
    pub alpha: Vec<f64>,
    /// Focal focusing exponent.
    pub gamma: f64,
}

fn scalar_or_list<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Alpha {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match Alpha::deserialize(d)? {
        Alpha::One(a) => vec![a],
        Alpha::Many(v) => v,
    })
}

impl Default for LossConfig {
    /// τ = 0.1, a single α = 0.8 applied to every class, γ = 2.
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            alpha: vec![0.8],
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    /// τ = 0.1, α = 0.8 for every class, γ = 2.
    pub fn defaults(num_classes: usize) -> Self {
        LossConfig {
            tau: 0.1,
            alpha: vec![0.8; num_classes],
            gamma: 2.0,
        }
    }

    /// Plain cross-entropy expressed as a focal configuration.
    pub fn cross_entropy(num_classes: usize, tau: f64) -> Self {
        LossConfig {
            tau,
            alpha: vec![1.0; num_classes],
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("train.loss.tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("train.loss.gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if self.alpha.is_empty() {
            return Err(Error::config("train.loss.alpha", "must not be empty"));
        }
        if let Some((i, a)) = self
            .alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::config(format!("train.loss.alpha[{i}]"), format!("must lie in [0,1], got {a}")));
        }
        Ok(())
    }
}

/// Unit-norm embeddings with their class labels.
#[derive(Clone, Debug)]
pub struct LabeledEmbeddingBatch {
    embeddings: Tensor,
    labels: Vec<usize>,
}

impl LabeledEmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for embeddings of shape {:?}",
                labels.len(),
                embeddings.shape()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Degenerate("empty embedding batch".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("label {l} outside [0, {num_classes})")));
        }
        check_unit_rows(&embeddings)?;
        Ok(LabeledEmbeddingBatch { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_unit_rows(z: &Tensor) -> Result<()> {
    let d = z.shape()[1];
    for (i, row) in z.data().chunks(d.max(1)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Validation(format!("embedding {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Result of building the contrastive loss on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: NodeId,
    /// Anchors that had at least one positive; the others contribute 0.
    pub anchors_with_positives: usize,
}

/// Supervised contrastive loss over the rows of `z` (an `N×d` node of unit
/// vectors):
///
/// `-Σ_i 1/|P_i| Σ_{j∈P_i} log( exp(z_i·z_j/τ) / Σ_{k≠i} exp(z_i·z_k/τ) )`
///
/// where `P_i` holds the other batch members sharing anchor `i`'s label.
/// Anchors without positives are skipped. The outer sum is not averaged.
pub fn supervised_contrastive_loss(
    g: &mut Graph,
    z: NodeId,
    labels: &[usize],
    tau: f64,
) -> Result<ContrastiveLoss> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config("train.loss.tau", format!("must be > 0, got {tau}")));
    }
    let zv = g.value(z);
    if zv.rank() != 2 || zv.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for embeddings of shape {:?}",
            labels.len(),
            zv.shape()
        )));
    }
    let n = labels.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "contrastive loss needs at least 2 samples, got {n}"
        )));
    }
    check_unit_rows(zv)?;

    let mut weights = vec![0.0; n * n];
    let mut anchors_with_positives = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors_with_positives += 1;
        let w = 1.0 / positives.len() as f64;
        for j in positives {
            weights[i * n + j] = w;
        }
    }
    let off_diagonal: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();

    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.affine(sim, 1.0 / tau, 0.0);
    let log_prob = g.masked_log_softmax(logits, off_diagonal)?;
    let weighted = g.mul_const(log_prob, Tensor::new(vec![n, n], weights)?)?;
    let total = g.sum(weighted);
    let loss = g.affine(total, -1.0, 0.0);
    Ok(ContrastiveLoss {
        loss,
        anchors_with_positives,
    })
}

/// Value of the contrastive loss for a validated batch.
pub fn supervised_contrastive_loss_value(batch: &LabeledEmbeddingBatch, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(batch.embeddings.clone());
    let out = supervised_contrastive_loss(&mut g, z, &batch.labels, tau)?;
    Ok(g.value(out.loss).item())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if rows == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("label {l} outside [0, {classes})")));
    }
    Ok(())
}

fn check_probabilities(p: &Tensor) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::Shape(format!("probabilities must be N×C, got {:?}", p.shape())));
    }
    let c = p.shape()[1];
    for (i, row) in p.data().chunks(c.max(1)).enumerate() {
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("probability row {i} has entries outside [0,1]")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn alpha_vector(cfg: &LossConfig, labels: &[usize]) -> Result<Tensor> {
    let alphas = labels
        .iter()
        .map(|&l| {
            let idx = if cfg.alpha.len() == 1 { 0 } else { l };
            cfg.alpha
                .get(idx)
                .copied()
                .ok_or_else(|| Error::config("train.loss.alpha", format!("no entry for class {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::vector(alphas))
}

/// `mean_i -α_t (1 - p_t)^γ log p_t` given nodes for `p_t` and `log p_t`.
fn focal_from_parts(g: &mut Graph, p_t: NodeId, log_p_t: NodeId, alpha: Tensor, gamma: f64) -> Result<NodeId> {
    let one_minus = g.affine(p_t, -1.0, 1.0);
    let modulating = g.pow_scalar(one_minus, gamma);
    let term = g.mul(modulating, log_p_t)?;
    let weighted = g.mul_const(term, alpha)?;
    let mean = g.mean(weighted)?;
    Ok(g.affine(mean, -1.0, 0.0))
}

/// Focal loss over an `N×C` node of class probabilities, averaged over
/// the batch. A ground-truth probability below [`PROB_FLOOR`] is clamped and
/// counted in [`Graph::clamp_count`].
pub fn focal_loss(g: &mut Graph, probs: NodeId, labels: &[usize], cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let pv = g.value(probs);
    check_probabilities(pv)?;
    check_labels(labels, pv.shape()[0], pv.shape()[1])?;
    let alpha = alpha_vector(cfg, labels)?;
    let p_t = g.pick_rows(probs, labels)?;
    let log_p_t = g.ln(p_t, PROB_FLOOR);
    focal_from_parts(g, p_t, log_p_t, alpha, cfg.gamma)
}

/// Focal loss over an `N×C` node of log-probabilities. This is the path
/// used in training: `log p_t` comes straight from a log-softmax, so it
/// never needs clamping.
pub fn focal_loss_from_log_probs(
    g: &mut Graph,
    log_probs: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let v = g.value(log_probs);
    if v.rank() != 2 {
        return Err(Error::Shape(format!("log-probabilities must be N×C, got {:?}", v.shape())));
    }
    check_labels(labels, v.shape()[0], v.shape()[1])?;
    let alpha = alpha_vector(cfg, labels)?;
    let log_p_t = g.pick_rows(log_probs, labels)?;
    let p_t = g.exp(log_p_t);
    focal_from_parts(g, p_t, log_p_t, alpha, cfg.gamma)
}

/// Mean negative log-likelihood of the ground-truth class.
pub fn cross_entropy(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let pv = g.value(probs);
    check_probabilities(pv)?;
    check_labels(labels, pv.shape()[0], pv.shape()[1])?;
    let p_t = g.pick_rows(probs, labels)?;
    let log_p_t = g.ln(p_t, PROB_FLOOR);
    let mean = g.mean(log_p_t)?;
    Ok(g.affine(mean, -1.0, 0.0))
}

/// Focal loss value and the number of clamped probabilities.
pub fn focal_loss_value(probs: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = focal_loss(&mut g, p, labels, cfg)?;
    Ok((g.value(loss).item(), g.clamp_count()))
}

pub fn cross_entropy_value(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = cross_entropy(&mut g, p, labels)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::{check_gradients, DEFAULT_STEP};

    /// Literal double loop over anchors and positives.
    fn contrastive_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let n = z.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if positives.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(&z[i], &z[k]) / tau).exp()).sum();
            let mut inner = 0.0;
            for &j in &positives {
                inner += ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
            }
            total += inner / positives.len() as f64;
        }
        -total
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn batch(z: &[Vec<f64>], labels: &[usize]) -> LabeledEmbeddingBatch {
        LabeledEmbeddingBatch::new(Tensor::from_rows(z).unwrap(), labels.to_vec(), 4).unwrap()
    }

    #[test]
    fn worked_three_sample_example() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let loss = supervised_contrastive_loss_value(&batch(&z, &[0, 0, 1]), 1.0).unwrap();
        // anchor 1: log(1 + e^-1); anchor 2: log 2; anchor 3 has no positives
        let expected = (1.0 + (-1.0f64).exp()).ln() + 2.0f64.ln();
        assert!((expected - 1.006409).abs() < 1e-6);
        assert!((loss - expected).abs() < 1e-12, "{loss}");
        assert!((loss - contrastive_oracle(&z, &[0, 0, 1], 1.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let z = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        assert_eq!(supervised_contrastive_loss_value(&batch(&z, &[2, 2]), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn distinct_labels_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_unit_rows(&mut rng, 4, 3);
        let mut g = Graph::new();
        let zn = g.constant(Tensor::from_rows(&z).unwrap());
        let out = supervised_contrastive_loss(&mut g, zn, &[0, 1, 2, 3], 0.5).unwrap();
        assert_eq!(g.value(out.loss).item(), 0.0);
        assert_eq!(out.anchors_with_positives, 0);
    }

    #[test]
    fn contrastive_errors() {
        let z = vec![vec![1.0, 0.0]];
        let b = batch(&z, &[0]);
        assert!(matches!(supervised_contrastive_loss_value(&b, 0.1), Err(Error::Degenerate(_))));
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch(&z, &[0, 0]);
        assert!(matches!(supervised_contrastive_loss_value(&b, 0.0), Err(Error::Config { .. })));
        let not_unit = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(LabeledEmbeddingBatch::new(not_unit, vec![0, 1], 2).is_err());
        let ok = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(LabeledEmbeddingBatch::new(ok, vec![5], 4).is_err());
    }

    #[test]
    fn contrastive_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..100 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=32);
            let tau = [0.1, 0.5, 1.0][case % 3];
            let z = random_unit_rows(&mut rng, n, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let got = supervised_contrastive_loss_value(&batch(&z, &labels), tau).unwrap();
            let want = contrastive_oracle(&z, &labels, tau);
            assert!((got - want).abs() <= 1e-9, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn increasing_positive_similarity_lowers_loss() {
        // anchor 0 and its positive 1 move closer while 2 stays put
        let labels = [0, 0, 1];
        let mut last = f64::INFINITY;
        for step in 0..6 {
            let angle = 1.5 - 0.25 * step as f64;
            let z = vec![vec![1.0, 0.0], vec![angle.cos(), angle.sin()], vec![0.0, -1.0]];
            let l = supervised_contrastive_loss_value(&batch(&z, &labels), 0.5).unwrap();
            assert!(l < last, "step {step}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn contrastive_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let d = rng.gen_range(2..6);
            let raw: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let report = check_gradients(&[Tensor::new(vec![n, d], raw).unwrap()], DEFAULT_STEP, |g, x| {
                let z = g.l2_normalize(x[0])?;
                Ok(supervised_contrastive_loss(g, z, &labels, 0.5)?.loss)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn contrastive_is_nonnegative_and_permutation_invariant(
            seed in 0u64..1000,
            n in 2usize..10,
            d in 1usize..6,
            tau in prop::sample::select(vec![0.1, 0.5, 1.0]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_unit_rows(&mut rng, n, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let l = supervised_contrastive_loss_value(&batch(&z, &labels), tau).unwrap();
            prop_assert!(l >= 0.0);
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            order.rotate_left(seed as usize % n);
            let zp: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
            let lp: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let l2 = supervised_contrastive_loss_value(&batch(&zp, &lp), tau).unwrap();
            prop_assert!((l - l2).abs() <= 1e-12);
        }
    }

    fn probs_with_pt(pt: f64) -> Tensor {
        let rest = (1.0 - pt) / 3.0;
        Tensor::from_rows(&[vec![pt, rest, rest, rest]]).unwrap()
    }

    #[test]
    fn focal_examples() {
        for (alpha, gamma) in [(0.8, 2.0), (0.25, 5.0), (1.0, 0.0)] {
            let cfg = LossConfig { tau: 0.1, alpha: vec![alpha; 4], gamma };
            let (l, _) = focal_loss_value(&probs_with_pt(1.0), &[0], &cfg).unwrap();
            assert_eq!(l, 0.0);
        }
        let ln2 = std::f64::consts::LN_2;
        let ce = LossConfig::cross_entropy(4, 0.1);
        let (l, _) = focal_loss_value(&probs_with_pt(0.5), &[0], &ce).unwrap();
        assert!((l - ln2).abs() < 1e-15);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = focal_loss_value(&probs_with_pt(0.5), &[0], &LossConfig::defaults(4)).unwrap();
        assert!((l - 0.8 * 0.25 * ln2).abs() < 1e-15);
        assert!((l - 0.138629).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_value(&probs_with_pt(1.0), &[0]).unwrap(), 0.0);
        let l = cross_entropy_value(&probs_with_pt(0.5), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let cfg = LossConfig::cross_entropy(2, 0.1);
        let (l, clamped) = focal_loss_value(&p, &[0, 0], &cfg).unwrap();
        assert_eq!(clamped, 1);
        let expected = (-(PROB_FLOOR.ln()) + std::f64::consts::LN_2) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!(l.is_finite());
    }

    #[test]
    fn focal_rejects_bad_inputs() {
        let cfg = LossConfig::defaults(2);
        let p = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(focal_loss_value(&p, &[0], &cfg), Err(Error::Validation(_))));
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(focal_loss_value(&p, &[2], &cfg).is_err());
        let bad = LossConfig { alpha: vec![1.5, 0.5], ..cfg };
        assert!(matches!(focal_loss_value(&p, &[0], &bad), Err(Error::Config { .. })));
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn focal_matches_direct_evaluation_and_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (n, c) = (rng.gen_range(1..10), 4);
            let p = random_probs(&mut rng, n, c);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let alpha: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gamma = rng.gen_range(0.0..4.0);
            let cfg = LossConfig { tau: 0.1, alpha: alpha.clone(), gamma };
            let direct: f64 = labels
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let pt = p.data()[i * c + t];
                    -alpha[t] * (1.0 - pt).powf(gamma) * pt.ln()
                })
                .sum::<f64>()
                / n as f64;
            let (l, _) = focal_loss_value(&p, &labels, &cfg).unwrap();
            assert!((l - direct).abs() <= 1e-12);

            let (fl, _) = focal_loss_value(&p, &labels, &LossConfig::cross_entropy(c, 0.1)).unwrap();
            let ce = cross_entropy_value(&p, &labels).unwrap();
            assert!((fl - ce).abs() <= 1e-12);
        }
    }

    #[test]
    fn focal_strictly_decreases_in_gamma() {
        for pt in [0.05, 0.3, 0.5, 0.9] {
            let mut last = f64::INFINITY;
            for gamma in [0.0, 1.0, 2.0, 5.0] {
                let cfg = LossConfig { tau: 0.1, alpha: vec![0.8; 4], gamma };
                let (l, _) = focal_loss_value(&probs_with_pt(pt), &[0], &cfg).unwrap();
                assert!(l < last, "p_t={pt} gamma={gamma}");
                last = l;
            }
        }
    }

    #[test]
    fn focal_gradcheck_on_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let logits: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let cfg = LossConfig {
                tau: 0.1,
                alpha: (0..4).map(|_| rng.gen_range(0.1..1.0)).collect(),
                gamma: [0.0, 1.0, 2.0, 3.5][rng.gen_range(0..4)],
            };
            let x = Tensor::new(vec![n, 4], logits).unwrap();
            let r = check_gradients(std::slice::from_ref(&x), DEFAULT_STEP, |g, ids| {
                let lp = g.log_softmax(ids[0])?;
                focal_loss_from_log_probs(g, lp, &labels, &cfg)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
            let r = check_gradients(&[x], DEFAULT_STEP, |g, ids| {
                let lp = g.log_softmax(ids[0])?;
                let p = g.exp(lp);
                focal_loss(g, p, &labels, &cfg)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
    }

    #[test]
    fn log_prob_and_prob_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 1, 2, 3, 0];
        let cfg = LossConfig::defaults(4);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let lp = g.log_softmax(xi).unwrap();
        let p = g.exp(lp);
        let a = focal_loss_from_log_probs(&mut g, lp, &labels, &cfg).unwrap();
        let b = focal_loss(&mut g, p, &labels, &cfg).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-14);
    }
}

//! Classification metrics and embedding-space quality measures.

use serde::{Deserialize, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{embeddings, predict};
use crate::model::{Model, ModelParams};
use crate::numerics::Tensor;

/// `C×C` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_pairs(num_classes: usize, labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut m = ConfusionMatrix::new(num_classes);
        for (&t, &p) in labels.iter().zip(predictions) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, prediction: usize) -> Result<()> {
        let c = self.num_classes();
        if truth >= c || prediction >= c {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {prediction}) outside [0, {c})"
            )));
        }
        self.counts[truth][prediction] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth][prediction]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Trace over total; `None` when nothing was recorded.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// Diagonal over row sum; `None` for a class with no samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let support: u64 = self.counts[class].iter().sum();
        (support > 0).then(|| self.counts[class][class] as f64 / support as f64)
    }

    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.num_classes()).map(|c| self.recall(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvaluation {
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

fn check_classes(model: &Model, data: &Dataset) -> Result<()> {
    if model.config().num_classes != data.num_classes() {
        return Err(Error::config(
            "train.model.num_classes",
            format!(
                "checkpoint predicts {} classes, dataset has {}",
                model.config().num_classes,
                data.num_classes()
            ),
        ));
    }
    Ok(())
}

/// Arg-max predictions on unaugmented samples, tallied against labels.
pub fn evaluate_classifier(model: &Model, params: &ModelParams, data: &Dataset) -> Result<ClassifierEvaluation> {
    check_classes(model, data)?;
    if data.is_empty() {
        return Err(Error::Degenerate("cannot evaluate on an empty dataset".into()));
    }
    let predictions = predict(model, params, data)?;
    let labels: Vec<usize> = data.samples().iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::from_pairs(data.num_classes(), &labels, &predictions)?;
    Ok(ClassifierEvaluation {
        accuracy: confusion.accuracy().expect("non-empty"),
        per_class_recall: confusion.per_class_recall(),
        confusion,
    })
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingQuality {
    /// Mean cosine similarity over same-class pairs.
    pub intra: f64,
    /// Mean cosine similarity over different-class pairs.
    pub inter: f64,
    /// `(1 + intra) / (1 + inter)`; infinite (written as null) when
    /// `inter = -1`.
    #[serde(serialize_with = "finite_or_null")]
    pub separation_ratio: f64,
    /// Mean silhouette under cosine distance.
    pub silhouette: f64,
    /// Classes with a single sample, which have no same-class pairs.
    pub singleton_classes: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cluster statistics of the rows of `embeddings` grouped by `labels`.
pub fn embedding_quality(embeddings: &Tensor, labels: &[usize]) -> Result<EmbeddingQuality> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for embeddings of shape {:?}",
            labels.len(),
            embeddings.shape()
        )));
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; num_classes];
    for &l in labels {
        sizes[l] += 1;
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| sizes[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Degenerate("embedding quality needs at least two classes".into()));
    }
    let singleton_classes = present.iter().filter(|&&c| sizes[c] == 1).count();

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = cosine(embeddings.row(i), embeddings.row(j));
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let (mut intra, mut intra_n, mut inter, mut inter_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                intra += sim[i * n + j];
                intra_n += 1;
            } else {
                inter += sim[i * n + j];
                inter_n += 1;
            }
        }
    }
    let intra = if intra_n > 0 { intra / intra_n as f64 } else { f64::NAN };
    let inter = inter / inter_n as f64;

    let mut silhouette = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut dist_sum = vec![0.0; num_classes];
        for j in 0..n {
            if j != i {
                dist_sum[labels[j]] += 1.0 - sim[i * n + j];
            }
        }
        let own = labels[i];
        let a = dist_sum[own] / (sizes[own] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| dist_sum[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            silhouette += (b - a) / m;
        }
    }
    silhouette /= n as f64;

    Ok(EmbeddingQuality {
        intra,
        inter,
        separation_ratio: (1.0 + intra) / (1.0 + inter),
        silhouette,
        singleton_classes,
    })
}

/// Embedding quality of the projected embeddings of `data`.
pub fn evaluate_embeddings(model: &Model, params: &ModelParams, data: &Dataset) -> Result<EmbeddingQuality> {
    let z = embeddings(model, params, data)?;
    let labels: Vec<usize> = data.samples().iter().map(|s| s.label).collect();
    let q = embedding_quality(&z, &labels)?;
    if q.singleton_classes > 0 {
        log::warn!("{} classes with a single sample excluded from intra-class similarity", q.singleton_classes);
    }
    Ok(q)
}

/// The evaluation report written by the command line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub embedding_quality: Option<EmbeddingQuality>,
}

impl EvalReport {
    pub fn new(classifier: ClassifierEvaluation, embedding_quality: Option<EmbeddingQuality>) -> Self {
        EvalReport {
            accuracy: classifier.accuracy,
            per_class_recall: classifier.per_class_recall,
            confusion: classifier.confusion,
            embedding_quality,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn perfect_predictions_give_identity_matrix() {
        let labels = [0, 1, 2, 3, 1, 0];
        let m = ConfusionMatrix::from_pairs(4, &labels, &labels).unwrap();
        assert_eq!(m.accuracy(), Some(1.0));
        for t in 0..4 {
            for p in 0..4 {
                let expected = if t == p { labels.iter().filter(|&&l| l == t).count() as u64 } else { 0 };
                assert_eq!(m.get(t, p), expected);
            }
        }
    }

    #[test]
    fn majority_predictor_scores_the_majority_share() {
        let labels: Vec<usize> = [(0, 50), (1, 20), (2, 20), (3, 10)]
            .into_iter()
            .flat_map(|(c, k)| std::iter::repeat_n(c, k))
            .collect();
        let m = ConfusionMatrix::from_pairs(4, &labels, &vec![0; 100]).unwrap();
        assert_eq!(m.accuracy(), Some(0.5));
        assert_eq!(m.per_class_recall(), vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn hand_tallied_matrix() {
        // (true, predicted): (0,0) (0,1) (1,1) (2,1) (2,2) (2,0)
        let m = ConfusionMatrix::from_pairs(3, &[0, 0, 1, 2, 2, 2], &[0, 1, 1, 1, 2, 0]).unwrap();
        assert_eq!(m.rows(), &[vec![1, 1, 0], vec![0, 1, 0], vec![1, 1, 1]]);
        assert_eq!(m.total(), 6);
        assert_eq!(m.accuracy(), Some(0.5));
        assert_eq!(m.per_class_recall(), vec![Some(0.5), Some(1.0), Some(1.0 / 3.0)]);
    }

    #[test]
    fn recall_is_undefined_without_support() {
        let m = ConfusionMatrix::from_pairs(3, &[0, 1], &[0, 2]).unwrap();
        assert_eq!(m.recall(2), None);
        assert_eq!(m.recall(1), Some(0.0));
        assert!(ConfusionMatrix::from_pairs(3, &[3], &[0]).is_err());
    }

    #[test]
    fn antipodal_clusters_are_perfectly_separated() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let q = embedding_quality(&z, &[0, 0, 1, 1]).unwrap();
        assert_eq!(q.intra, 1.0);
        assert_eq!(q.inter, -1.0);
        assert_eq!(q.silhouette, 1.0);
        assert!(q.separation_ratio.is_infinite());
        let json = serde_json::to_value(&q).unwrap();
        assert!(json["separation_ratio"].is_null());
    }

    #[test]
    fn identical_embeddings_have_zero_silhouette() {
        let z = Tensor::from_rows(&vec![vec![0.6, 0.8]; 6]).unwrap();
        let q = embedding_quality(&z, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!((q.intra - 1.0).abs() < 1e-15 && (q.inter - 1.0).abs() < 1e-15);
        assert_eq!(q.silhouette, 0.0);
    }

    /// All ordered pairs, distances recomputed from scratch for every sample.
    fn naive_quality(rows: &[Vec<f64>], labels: &[usize]) -> (f64, f64, f64) {
        let cos = |a: &Vec<f64>, b: &Vec<f64>| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let n = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (n(a) * n(b))
        };
        let n = rows.len();
        let (mut si, mut ni, mut se, mut ne) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    si += cos(&rows[i], &rows[j]);
                    ni += 1.0;
                } else {
                    se += cos(&rows[i], &rows[j]);
                    ne += 1.0;
                }
            }
        }
        let classes: Vec<usize> = {
            let mut c = labels.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        let mut sil = 0.0;
        for i in 0..n {
            let mean_dist = |c: usize| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
                others.iter().map(|&j| 1.0 - cos(&rows[i], &rows[j])).sum::<f64>() / others.len() as f64
            };
            if labels.iter().filter(|&&l| l == labels[i]).count() == 1 {
                continue;
            }
            let a = mean_dist(labels[i]);
            let b = classes
                .iter()
                .filter(|&&c| c != labels[i])
                .map(|&c| mean_dist(c))
                .fold(f64::INFINITY, f64::min);
            sil += (b - a) / a.max(b);
        }
        (si / ni, se / ne, sil / n as f64)
    }

    #[test]
    fn matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<usize> = (0..20).map(|i| if i < 4 { i } else { rng.gen_range(0..4) }).collect();
            let q = embedding_quality(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
            let (intra, inter, sil) = naive_quality(&rows, &labels);
            assert!((q.intra - intra).abs() <= 1e-12);
            assert!((q.inter - inter).abs() <= 1e-12);
            assert!((q.silhouette - sil).abs() <= 1e-12);
        }
    }

    #[test]
    fn invariant_to_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<Vec<f64>> = (0..15).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let a = embedding_quality(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        let order: Vec<usize> = (0..15).rev().collect();
        let rows_p: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let b = embedding_quality(&Tensor::from_rows(&rows_p).unwrap(), &labels_p).unwrap();
        assert!((a.intra - b.intra).abs() <= 1e-12);
        assert!((a.inter - b.inter).abs() <= 1e-12);
        assert!((a.silhouette - b.silhouette).abs() <= 1e-12);
    }

    #[test]
    fn singleton_classes_are_counted() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]).unwrap();
        let q = embedding_quality(&z, &[0, 0, 1]).unwrap();
        assert_eq!(q.singleton_classes, 1);
        assert!(embedding_quality(&z, &[0, 0, 0]).is_err());
    }
}

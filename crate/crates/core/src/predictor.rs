//! One-class membership predictor that gates the index search.
//!
//! The model is a coverage sketch: `c` k-means centroids over the indexed
//! embeddings plus a radius `tau`, the configured quantile of the training
//! points' distances to their nearest centroid. A query is predicted to have
//! a match when some centroid lies within `tau`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{l2_distance, Embedding};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub centroids: usize,
    pub threshold_quantile: f64,
    /// Retrain once this fraction of the index has changed since the last fit.
    pub retrain_fraction: f64,
    pub lloyd_iterations: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            centroids: 64,
            threshold_quantile: 0.99,
            retrain_fraction: 0.05,
            lloyd_iterations: 6,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.centroids == 0 {
            return Err(Error::InvalidConfig("predictor needs at least one centroid".into()));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold quantile must lie in (0, 1], got {}",
                self.threshold_quantile
            )));
        }
        if !(0.0..=1.0).contains(&self.retrain_fraction) {
            return Err(Error::InvalidConfig(format!(
                "retrain fraction must lie in [0, 1], got {}",
                self.retrain_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub centroids: Vec<Vec<f64>>,
    pub tau: f64,
    pub trained_on_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_positive += 1,
            (true, false) => self.false_positive += 1,
            (false, false) => self.true_negative += 1,
            (false, true) => self.false_negative += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    /// Fraction of predicted matches that were real; 1.0 when nothing was
    /// predicted, since no search was wasted.
    pub fn precision(&self) -> f64 {
        let predicted = self.true_positive + self.false_positive;
        if predicted == 0 {
            1.0
        } else {
            self.true_positive as f64 / predicted as f64
        }
    }

    /// Fraction of real matches that were predicted; 1.0 when there were none.
    pub fn recall(&self) -> f64 {
        let actual = self.true_positive + self.false_negative;
        if actual == 0 {
            1.0
        } else {
            self.true_positive as f64 / actual as f64
        }
    }
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, l2_distance(c, x)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("model has at least one centroid")
}

/// Seeded k-means++ initialisation.
fn seed_centroids(points: &[&[f64]], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| l2_distance(p, &centroids[0]).powi(2)).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        let chosen = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(l2_distance(p, &chosen).powi(2));
        }
        centroids.push(chosen);
    }
    centroids
}

pub fn train<'a>(
    positives: impl IntoIterator<Item = &'a Embedding>,
    config: &PredictorConfig,
) -> Result<PredictorModel> {
    let points: Vec<&[f64]> = positives.into_iter().map(|e| e.as_slice()).collect();
    if points.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = seed_centroids(&points, config.centroids.min(points.len()), &mut rng);

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..config.lloyd_iterations {
        for (a, p) in assignment.iter_mut().zip(&points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, p) in assignment.iter().zip(&points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }

    let mut distances: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
    distances.sort_by(f64::total_cmp);
    let rank = ((config.threshold_quantile * distances.len() as f64).ceil() as usize).clamp(1, distances.len());
    Ok(PredictorModel {
        centroids,
        tau: distances[rank - 1],
        trained_on_count: points.len(),
    })
}

impl PredictorModel {
    /// True when the nearest centroid is within `tau` (inclusive).
    pub fn predict(&self, e: &Embedding) -> bool {
        nearest(&self.centroids, e.as_slice()).1 <= self.tau
    }

    pub fn evaluate(&self, labeled: &[(Embedding, bool)]) -> Result<Confusion> {
        if labeled.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let mut confusion = Confusion::default();
        for (e, actual) in labeled {
            confusion.record(self.predict(e), *actual);
        }
        Ok(confusion)
    }
}

/// Strictly above the threshold triggers a retrain.
pub fn needs_retrain(change_fraction: f64, threshold: f64) -> bool {
    change_fraction > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{cosine_similarity, normalize, random_unit_vector, vector_at_similarity};

    fn cluster(center: &Embedding, n: usize, s: f64, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vector_at_similarity(&mut rng, center, s)).collect()
    }

    #[test]
    fn tight_cluster_and_far_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let center = random_unit_vector(&mut rng, 64);
        let pts = cluster(&center, 200, 0.95, 2);
        let model = train(&pts, &PredictorConfig::default()).unwrap();
        assert!(model.predict(&center));
        let far = normalize(&center.as_slice().iter().map(|x| -x).collect::<Vec<_>>()).unwrap();
        assert!(pts.iter().all(|p| cosine_similarity(p, &far).unwrap().value() < 0.0));
        assert!(!model.predict(&far));
        // tau is a training distance, so the far point's distance oracle exceeds it.
        let d = model
            .centroids
            .iter()
            .map(|c| l2_distance(c, far.as_slice()))
            .fold(f64::INFINITY, f64::min);
        assert!(d > model.tau);
    }

    #[test]
    fn training_members_mostly_predicted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Embedding> = (0..500).map(|_| random_unit_vector(&mut rng, 64)).collect();
        let model = train(&pts, &PredictorConfig::default()).unwrap();
        let covered = pts.iter().filter(|p| model.predict(p)).count();
        assert!(covered as f64 >= 0.99 * pts.len() as f64);
        let overfit = train(
            &pts,
            &PredictorConfig {
                threshold_quantile: 1.0,
                ..PredictorConfig::default()
            },
        )
        .unwrap();
        assert!(pts.iter().all(|p| overfit.predict(p)));
    }

    #[test]
    fn boundary_is_inclusive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_unit_vector(&mut rng, 8);
        let model = PredictorModel {
            centroids: vec![e.as_slice().to_vec()],
            tau: 0.0,
            trained_on_count: 1,
        };
        assert!(model.predict(&e));
    }

    #[test]
    fn deterministic_retrain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Embedding> = (0..300).map(|_| random_unit_vector(&mut rng, 64)).collect();
        let probe: Vec<Embedding> = (0..300).map(|_| random_unit_vector(&mut rng, 64)).collect();
        let a = train(&pts, &PredictorConfig::default()).unwrap();
        let b = train(&pts, &PredictorConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(probe.iter().all(|p| a.predict(p) == b.predict(p)));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(
            train(&[], &PredictorConfig::default()),
            Err(Error::EmptyTrainingSet)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = train(&[random_unit_vector(&mut rng, 4)], &PredictorConfig::default()).unwrap();
        assert_eq!(model.centroids.len(), 1);
        assert!(matches!(model.evaluate(&[]), Err(Error::EmptyEvaluationSet)));
    }

    #[test]
    fn evaluation_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = random_unit_vector(&mut rng, 8);
        let always = PredictorModel {
            centroids: vec![e.as_slice().to_vec()],
            tau: 10.0,
            trained_on_count: 1,
        };
        let labeled: Vec<(Embedding, bool)> = (0..10).map(|i| (random_unit_vector(&mut rng, 8), i % 2 == 0)).collect();
        let c = always.evaluate(&labeled).unwrap();
        assert_eq!((c.precision(), c.recall()), (0.5, 1.0));
        let truthful: Vec<(Embedding, bool)> = labeled.iter().map(|(e, _)| (e.clone(), true)).collect();
        let c = always.evaluate(&truthful).unwrap();
        assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    }

    #[test]
    fn retrain_threshold() {
        assert!(!needs_retrain(0.04, 0.05));
        assert!(needs_retrain(0.06, 0.05));
        assert!(!needs_retrain(0.05, 0.05));
    }
}

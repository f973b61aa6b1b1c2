use serde::{Deserialize, Serialize};

/// Distance used by the nearest-neighbour classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// Distance induced by a unit-variance squared-exponential kernel,
    /// `sqrt(2 - 2 k(x, x'))`.
    SeKernel { lengthscales: Vec<f64> },
}

impl Metric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            Metric::SeKernel { lengthscales } => {
                let r2: f64 = a
                    .iter()
                    .zip(b)
                    .zip(lengthscales)
                    .map(|((x, y), l)| ((x - y) / l).powi(2))
                    .sum();
                (2.0 - 2.0 * (-0.5 * r2).exp()).max(0.0).sqrt()
            }
        }
    }
}

/// Inverse-square-distance weighted k-nearest-neighbour estimate of the
/// probability that a point carries a positive label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnClassifier {
    points: Vec<Vec<f64>>,
    labels: Vec<bool>,
    k: usize,
    metric: Metric,
}

impl KnnClassifier {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<bool>, k: usize, metric: Metric) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        KnnClassifier {
            points,
            labels,
            k: k.max(1),
            metric,
        }
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        if !self.labels.iter().any(|&l| l) {
            return 0.0;
        }
        let mut near: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (self.metric.distance(x, p), i))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(self.k.min(near.len()));

        let exact: Vec<usize> = near.iter().filter(|(d, _)| *d == 0.0).map(|&(_, i)| i).collect();
        if !exact.is_empty() {
            let pos = exact.iter().filter(|&&i| self.labels[i]).count();
            return pos as f64 / exact.len() as f64;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(d, i) in &near {
            let w = 1.0 / (d * d);
            den += w;
            if self.labels[i] {
                num += w;
            }
        }
        num / den
    }
}

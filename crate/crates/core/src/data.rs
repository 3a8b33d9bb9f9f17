//! Datasets, synthetic Gaussian-cluster generation and non-IID partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::rng::StreamRng;
use crate::{Error, Result};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Config(
                "dataset needs dim > 0 and num_classes > 0".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Contract(format!(
                "feature matrix has {} values, expected {} rows x {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy with the given labels and identical features.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.dim, self.num_classes)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Reads `f0,...,f{dim-1},label` CSV. `dim` is taken from the header.
    pub fn from_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let dim = headers.len().saturating_sub(1);
        let expected: Vec<String> = (0..dim)
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if dim == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Config(format!(
                "CSV header must be `f0,...,f{{dim-1}},label`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            for field in record.iter().take(dim) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("row {}: bad feature value `{field}`", line + 1))
                })?;
                features.push(v);
            }
            let raw = record.get(dim).unwrap_or("").trim();
            let label: usize = raw
                .parse()
                .map_err(|_| Error::Config(format!("row {}: bad label `{raw}`", line + 1)))?;
            labels.push(label);
        }
        Self::new(features, labels, dim, num_classes)
    }
}

/// Per-coordinate standard deviation of the class means drawn by
/// [`make_synthetic`].
pub const DEFAULT_MEAN_SCALE: f64 = 1.0;

/// Gaussian class clusters: one mean per class, unit isotropic noise.
#[derive(Debug, Clone)]
pub struct GaussianClusters {
    means: Vec<f64>,
    dim: usize,
    num_classes: usize,
}

impl GaussianClusters {
    /// Draws class means with i.i.d. `N(0, mean_scale^2)` coordinates.
    pub fn new(
        num_classes: usize,
        dim: usize,
        mean_scale: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if num_classes < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "synthetic data needs num_classes >= 2 and dim >= 1 (got {num_classes}, {dim})"
            )));
        }
        if !(mean_scale.is_finite() && mean_scale > 0.0) {
            return Err(Error::Config(format!(
                "mean_scale must be positive, got {mean_scale}"
            )));
        }
        let means = (0..num_classes * dim)
            .map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            means,
            dim,
            num_classes,
        })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// Smallest Euclidean distance between two class means, in units of the
    /// noise standard deviation.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let d: f64 = self
                    .mean(a)
                    .iter()
                    .zip(self.mean(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// `total` samples with labels assigned round-robin, so class counts
    /// differ by at most one.
    pub fn sample(&self, total: usize, rng: &mut StreamRng) -> Dataset {
        let mut features = Vec::with_capacity(total * self.dim);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let class = i % self.num_classes;
            for &m in self.mean(class) {
                features.push(m + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(class);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

/// Gaussian class-cluster dataset; a pure function of its arguments.
pub fn make_synthetic(
    num_classes: usize,
    dim: usize,
    total_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    use crate::rng::{Purpose, RngStreams};
    if total_samples == 0 {
        return Err(Error::Config("total_samples must be positive".into()));
    }
    let streams = RngStreams::new(seed);
    let clusters = GaussianClusters::new(
        num_classes,
        dim,
        DEFAULT_MEAN_SCALE,
        &mut streams.stream(Purpose::ClusterMeans, 0, 0),
    )?;
    Ok(clusters.sample(
        total_samples,
        &mut streams.stream(Purpose::TrainSamples, 0, 0),
    ))
}

/// Splits `data` across `num_clients` with per-class Dirichlet(`alpha`)
/// proportions.
///
/// Clients left empty by the draw receive one sample taken from the current
/// largest client (lowest id on ties) until every client holds at least one.
/// Each partition keeps the source row order.
pub fn partition_dirichlet(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    rng: &mut StreamRng,
) -> Result<Vec<Dataset>> {
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be at least 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!(
            "dirichlet_alpha must be positive, got {alpha}"
        )));
    }
    if data.len() < num_clients {
        return Err(Error::Config(format!(
            "cannot split {} samples across {num_clients} clients",
            data.len()
        )));
    }
    if num_clients == 1 {
        return Ok(vec![data.clone()]);
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // every gamma draw underflowed; give the class to one client
            let k = rng.random_range(0..num_clients);
            props = (0..num_clients)
                .map(|c| if c == k { 1.0 } else { 0.0 })
                .collect();
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            assignment[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for part in &mut assignment {
        part.sort_unstable();
    }
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by(|&a, &b| {
                assignment[a]
                    .len()
                    .cmp(&assignment[b].len())
                    .then(b.cmp(&a))
            })
            .expect("num_clients > 0");
        let moved = assignment[largest]
            .pop()
            .expect("largest client has samples");
        assignment[empty].push(moved);
    }
    Ok(assignment.iter().map(|idx| data.select(idx)).collect())
}

//! Pseudo-label generation: DBSCAN over a precomputed distance matrix (the
//! default backend) and seeded k-means++ / Lloyd (ablation backend).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{self, DistanceMatrix, JaccardParams};
use crate::corpus::EmbeddingSet;
use crate::linalg::{self, Matrix};
use crate::{Error, Modality, Result};

/// Per-instance cluster ids; `None` marks an outlier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    modality: Modality,
    labels: Vec<Option<usize>>,
    n_clusters: usize,
}

impl PseudoLabeling {
    /// Wraps arbitrary labels, compacting cluster ids (see [`relabel_dense`]).
    pub fn new(modality: Modality, labels: Vec<Option<usize>>) -> Self {
        let (labels, n_clusters) = relabel_dense(&labels);
        PseudoLabeling { modality, labels, n_clusters }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, id: usize) -> Option<usize> {
        self.labels[id]
    }

    #[inline]
    pub fn is_clustered(&self, id: usize) -> bool {
        self.labels[id].is_some()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn outliers(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(cluster))
            .map(|(i, _)| i)
            .collect()
    }

    /// Member lists for every cluster, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_clusters];
        for c in self.labels.iter().flatten() {
            out[*c] += 1;
        }
        out
    }

    /// Moves an outlier into an existing cluster.
    pub fn assign(&mut self, id: usize, cluster: usize) -> Result<()> {
        if cluster >= self.n_clusters {
            return Err(Error::Index { cluster, n_clusters: self.n_clusters });
        }
        self.labels[id] = Some(cluster);
        Ok(())
    }

    /// Marks an instance as an outlier and compacts the cluster ids.
    pub fn mark_outlier(&mut self, id: usize) {
        self.labels[id] = None;
        let (labels, n) = relabel_dense(&self.labels);
        self.labels = labels;
        self.n_clusters = n;
    }
}

/// Compacts cluster ids to `0..m` in order of first appearance, leaving
/// outliers in place. Returns the new labels and `m`.
pub fn relabel_dense(labels: &[Option<usize>]) -> (Vec<Option<usize>>, usize) {
    let mut map: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        out.push(l.map(|c| match map.iter().find(|(old, _)| *old == c) {
            Some(&(_, new)) => new,
            None => {
                let new = map.len();
                map.push((c, new));
                new
            }
        }));
    }
    (out, map.len())
}

/// DBSCAN on a precomputed symmetric distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are the connected components of core points,
/// discovered in ascending id order. A border point joins the cluster of its
/// lowest-id core neighbour; everything else is an outlier.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize, modality: Modality) -> Result<PseudoLabeling> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    if min_pts < 1 {
        return Err(Error::Parameter("min_pts must be >= 1".into()));
    }
    let n = dist.n();
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0usize;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        // neighbours are ascending, so the first core one has the lowest id
        labels[i] = neighbors[i].iter().find(|&&q| core[q]).and_then(|&q| labels[q]);
    }
    Ok(PseudoLabeling { modality, labels, n_clusters: next })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutput {
    pub labeling: PseudoLabeling,
    pub centroids: Matrix,
    /// Sum of squared distances to the assigned centroid after every
    /// assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap_or(0)
        } else {
            rng.random_range(0..n)
        };
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean distance.
pub fn kmeans_with_trace(set: &EmbeddingSet, k: usize, max_iters: usize, seed: u64) -> Result<KMeansOutput> {
    let points = set.matrix();
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k={k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let (best, bd) = (0..k)
                .map(|c| (c, sq_dist(points.row(i), centroids.row(c))))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            dists[i] = bd;
            objective += bd;
        }
        trace.push(objective);
        if !changed || iterations >= max_iters.max(1) {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            linalg::axpy(1.0, points.row(i), sums.row_mut(assign[i]));
            counts[assign[i]] += 1;
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // re-seed from the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(a) if dists[a] >= dists[i] => Some(a),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }
    let labels = assign.into_iter().map(Some).collect();
    Ok(KMeansOutput {
        labeling: PseudoLabeling::new(set.modality(), labels),
        centroids,
        objective_trace: trace,
        iterations,
    })
}

pub fn kmeans(set: &EmbeddingSet, k: usize, max_iters: usize, seed: u64) -> Result<PseudoLabeling> {
    kmeans_with_trace(set, k, max_iters, seed).map(|o| o.labeling)
}

/// Distance fed to DBSCAN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterMetric {
    Jaccard(JaccardParams),
    Cosine,
}

impl Default for ClusterMetric {
    fn default() -> Self {
        ClusterMetric::Jaccard(JaccardParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ClusterBackend {
    Dbscan { eps: f64, min_pts: usize, metric: ClusterMetric },
    Kmeans { k: usize, max_iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub image: ClusterBackend,
    pub text: ClusterBackend,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            image: ClusterBackend::Dbscan { eps: 0.5, min_pts: 2, metric: ClusterMetric::default() },
            text: ClusterBackend::Dbscan { eps: 0.6, min_pts: 4, metric: ClusterMetric::default() },
        }
    }
}

impl ClusteringConfig {
    pub fn for_modality(&self, modality: Modality) -> &ClusterBackend {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}

/// The distance matrix DBSCAN would see for `set` under `metric`.
pub fn clustering_distance(set: &EmbeddingSet, metric: &ClusterMetric) -> Result<DistanceMatrix> {
    let cosine = affinity::cosine_distance_matrix(set);
    match metric {
        ClusterMetric::Cosine => Ok(cosine),
        ClusterMetric::Jaccard(p) => affinity::jaccard_distance_matrix(&cosine, p),
    }
}

/// Clusters one modality with the configured backend.
pub fn cluster_set(set: &EmbeddingSet, backend: &ClusterBackend, seed: u64) -> Result<PseudoLabeling> {
    match *backend {
        ClusterBackend::Dbscan { eps, min_pts, ref metric } => {
            let d = clustering_distance(set, metric)?;
            dbscan(&d, eps, min_pts, set.modality())
        }
        ClusterBackend::Kmeans { k, max_iters } => kmeans(set, k.min(set.count()), max_iters, seed),
    }
}

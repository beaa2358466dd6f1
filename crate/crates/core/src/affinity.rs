//! Pairwise distance matrices: plain cosine distance and the k-reciprocal
//! Jaccard re-ranking distance used as the clustering metric.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingSet;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    Cosine,
    Jaccard,
    /// Caller-supplied values of any metric.
    Precomputed,
}

/// Square `n x n` distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
    kind: DistanceKind,
}

impl DistanceMatrix {
    pub fn from_vec(n: usize, data: Vec<f64>, kind: DistanceKind) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} distance matrix", data.len())));
        }
        Ok(DistanceMatrix { n, data, kind })
    }

    /// Builds a matrix from a distance function over indices.
    pub fn from_fn(n: usize, kind: DistanceKind, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        DistanceMatrix { n, data, kind }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// `d <- (d + dᵀ) / 2`
    pub fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
    }

    /// Indices of all other points sorted by `(distance, index)`.
    fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.row(i);
        let mut idx: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        idx
    }
}

/// `1 - <x_i, x_j>` for all pairs, clamped to `[0, 2]` with an exact zero
/// diagonal.
pub fn cosine_distance_matrix(set: &EmbeddingSet) -> DistanceMatrix {
    let m = set.matrix();
    let n = m.rows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (1.0 - crate::linalg::dot(m.row(i), m.row(j))).clamp(0.0, 2.0);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix { n, data, kind: DistanceKind::Cosine }
}

/// Precomputed nearest-neighbour rankings (self excluded, ties by index).
///
/// A k-nearest set also takes every point tied with the k-th neighbour, so
/// exact duplicates are always treated alike.
pub struct NeighborTable {
    ranked: Vec<Vec<usize>>,
    dists: Vec<Vec<f64>>,
}

impl NeighborTable {
    pub fn new(dist: &DistanceMatrix) -> Self {
        let ranked: Vec<Vec<usize>> = (0..dist.n()).map(|i| dist.ranking(i)).collect();
        let dists = ranked
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|&j| dist.get(i, j)).collect())
            .collect();
        NeighborTable { ranked, dists }
    }

    /// The `k` nearest neighbours of `i` plus any ties with the k-th.
    pub fn knn(&self, i: usize, k: usize) -> &[usize] {
        let r = &self.ranked[i];
        let d = &self.dists[i];
        let mut end = k.min(r.len());
        if end > 0 {
            while end < r.len() && d[end] == d[end - 1] {
                end += 1;
            }
        }
        &r[..end]
    }

    /// `R(i, k) = { j in kNN(i, k) : i in kNN(j, k) }`, ascending.
    pub fn k_reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.knn(i, k).iter().copied().filter(|&j| self.knn(j, k).contains(&i)).collect();
        out.sort_unstable();
        out
    }
}

/// k-reciprocal neighbours of point `i`: the `j` in `i`'s k nearest
/// neighbours whose own k nearest neighbours contain `i`.
pub fn k_reciprocal_neighbors(dist: &DistanceMatrix, i: usize, k: usize) -> Result<Vec<usize>> {
    if k >= dist.n() {
        return Err(Error::Parameter(format!("k={k} must be < n={}", dist.n())));
    }
    if i >= dist.n() {
        return Err(Error::Parameter(format!("index {i} out of range")));
    }
    Ok(NeighborTable::new(dist).k_reciprocal(i, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JaccardParams {
    /// Neighbourhood size of the k-reciprocal sets.
    pub k1: usize,
    /// Local query expansion width (self included); 1 disables it.
    pub k2: usize,
    /// Whether to apply the 2/3-overlap neighbourhood expansion.
    pub expansion: bool,
}

impl Default for JaccardParams {
    fn default() -> Self {
        JaccardParams { k1: 20, k2: 6, expansion: true }
    }
}

/// k-reciprocal Jaccard distance.
///
/// For each point `i`:
/// 1. `R(i, k1)`, expanded by every `R(j, ceil(k1/2))` for `j` in `R(i, k1)`
///    that shares at least two thirds of its members with `R(i, k1)`;
/// 2. a fuzzy membership vector `V_i[j] = exp(-dist(i, j))` over the
///    expanded set plus `i` itself;
/// 3. if `k2 > 1`, `V_i` is replaced by the mean of `V` over `i` and its
///    `k2 - 1` nearest neighbours;
/// 4. `d(i, j) = 1 - Σ min(V_i, V_j) / Σ max(V_i, V_j)`.
///
/// The result is symmetrized. `k1` is clamped to `n - 1` for tiny inputs.
pub fn jaccard_distance_matrix(dist: &DistanceMatrix, params: &JaccardParams) -> Result<DistanceMatrix> {
    let JaccardParams { k1, k2, expansion } = *params;
    if k2 > k1 {
        return Err(Error::Parameter(format!("k2={k2} must not exceed k1={k1}")));
    }
    if k1 == 0 {
        return Err(Error::Parameter("k1 must be >= 1".into()));
    }
    let n = dist.n();
    if n <= 1 {
        return Ok(DistanceMatrix { n, data: vec![0.0; n * n], kind: DistanceKind::Jaccard });
    }
    let k1 = k1.min(n - 1);
    let half = (math::ceil(k1 as f64 / 2.0) as usize).max(1);
    let table = NeighborTable::new(dist);

    // Sparse membership vectors: sorted (index, weight).
    let mut members: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = table.k_reciprocal(i, k1);
        let mut support: BTreeSet<usize> = base.iter().copied().collect();
        if expansion {
            for &j in &base {
                let cand = table.k_reciprocal(j, half);
                let overlap = cand.iter().filter(|c| base.binary_search(c).is_ok()).count();
                if 3 * overlap >= 2 * cand.len() {
                    support.extend(cand);
                }
            }
        }
        support.insert(i);
        members.push(support.into_iter().map(|j| (j, math::exp(-dist.get(i, j)))).collect());
    }

    if k2 > 1 {
        let mut expanded = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = vec![0.0; n];
            let mut touched = BTreeSet::new();
            let group = core::iter::once(i).chain(table.knn(i, k2 - 1).iter().copied());
            let mut count = 0usize;
            for m in group {
                count += 1;
                for &(j, w) in &members[m] {
                    acc[j] += w;
                    touched.insert(j);
                }
            }
            let c = count as f64;
            expanded.push(touched.into_iter().map(|j| (j, acc[j] / c)).collect::<Vec<_>>());
        }
        members = expanded;
    }

    // Dense scatter of V_i, then min/max sums against each sparse V_j.
    let mut data = vec![0.0; n * n];
    let mut dense = vec![0.0; n];
    for i in 0..n {
        for &(j, w) in &members[i] {
            dense[j] = w;
        }
        let mass_i: f64 = members[i].iter().map(|&(_, w)| w).sum();
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut min_sum = 0.0;
            let mut mass_j = 0.0;
            for &(m, w) in &members[j] {
                mass_j += w;
                let vi = dense[m];
                if vi > 0.0 {
                    min_sum += vi.min(w);
                }
            }
            // Σ max = Σ V_i + Σ V_j - Σ min
            let max_sum = mass_i + mass_j - min_sum;
            data[i * n + j] = if max_sum > 0.0 { (1.0 - min_sum / max_sum).clamp(0.0, 1.0) } else { 1.0 };
        }
        for &(j, _) in &members[i] {
            dense[j] = 0.0;
        }
    }
    let mut out = DistanceMatrix { n, data, kind: DistanceKind::Jaccard };
    out.symmetrize();
    Ok(out)
}

//! Retrieval evaluation: full gallery ranking, Rank-k recall, mAP and mINP.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingSet, GroundTruth};
use crate::linalg;
use crate::{Error, Result};

/// Per-query gallery ranking plus relevance, indexed by gallery id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    gallery_size: usize,
    order: Vec<Vec<usize>>,
    relevance: Vec<Vec<bool>>,
}

impl RankingResult {
    /// Wraps precomputed rankings. Each `order[q]` must be a permutation of
    /// the gallery ids and each `relevance[q]` cover the whole gallery.
    pub fn from_parts(order: Vec<Vec<usize>>, relevance: Vec<Vec<bool>>) -> Result<Self> {
        let gallery_size = relevance.first().map_or(0, Vec::len);
        if order.len() != relevance.len()
            || order.iter().any(|o| o.len() != gallery_size)
            || relevance.iter().any(|r| r.len() != gallery_size)
        {
            return Err(Error::Shape("ranking and relevance sizes disagree".into()));
        }
        Ok(RankingResult { gallery_size, order, relevance })
    }

    /// Ranking from a score table (`scores[q][g]`), descending, ties by
    /// ascending gallery id.
    pub fn from_scores(scores: &[Vec<f64>], relevance: Vec<Vec<bool>>) -> Result<Self> {
        let order = scores
            .iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx
            })
            .collect();
        RankingResult::from_parts(order, relevance)
    }

    pub fn n_queries(&self) -> usize {
        self.order.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn order(&self, q: usize) -> &[usize] {
        &self.order[q]
    }

    pub fn relevance(&self, q: usize) -> &[bool] {
        &self.relevance[q]
    }

    /// 1-based ranks of the relevant items of query `q`, ascending.
    pub fn relevant_ranks(&self, q: usize) -> Vec<usize> {
        self.order[q]
            .iter()
            .enumerate()
            .filter(|(_, &g)| self.relevance[q][g])
            .map(|(r, _)| r + 1)
            .collect()
    }
}

/// Ranks `gallery` for every query by inner product. Relevance means equal
/// ground-truth identity.
pub fn rank_gallery(queries: &EmbeddingSet, gallery: &EmbeddingSet, truth: Option<&GroundTruth>) -> Result<RankingResult> {
    let truth = truth.ok_or(Error::EvalWithoutTruth)?;
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(alloc::format!("query dim {} vs gallery dim {}", queries.dim(), gallery.dim())));
    }
    let q_ids = truth.of(queries.modality());
    let g_ids = truth.of(gallery.modality());
    if q_ids.len() != queries.count() || g_ids.len() != gallery.count() {
        return Err(Error::Shape("ground truth does not match query/gallery sizes".into()));
    }
    let scores: Vec<Vec<f64>> = (0..queries.count())
        .map(|q| (0..gallery.count()).map(|g| linalg::dot(queries.vector(q), gallery.vector(g))).collect())
        .collect();
    let relevance = (0..queries.count())
        .map(|q| g_ids.iter().map(|&gid| gid == q_ids[q]).collect())
        .collect();
    RankingResult::from_scores(&scores, relevance)
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn recall_at_k(result: &RankingResult, k: usize) -> f64 {
    if result.n_queries() == 0 {
        return 0.0;
    }
    let hits = (0..result.n_queries())
        .filter(|&q| result.order(q).iter().take(k).any(|&g| result.relevance(q)[g]))
        .count();
    hits as f64 / result.n_queries() as f64
}

/// Average precision of one query; `None` without relevant items.
pub fn average_precision(result: &RankingResult, q: usize) -> Option<f64> {
    let ranks = result.relevant_ranks(q);
    if ranks.is_empty() {
        return None;
    }
    let sum: f64 = ranks.iter().enumerate().map(|(m, &r)| (m + 1) as f64 / r as f64).sum();
    Some(sum / ranks.len() as f64)
}

/// Inverse negative penalty of one query: number of relevant items over the
/// rank of the last one retrieved.
pub fn inverse_negative_penalty(result: &RankingResult, q: usize) -> Option<f64> {
    let ranks = result.relevant_ranks(q);
    let last = *ranks.last()?;
    Some(ranks.len() as f64 / last as f64)
}

/// Mean of a per-query score over queries with relevant items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMean {
    pub value: f64,
    /// Queries skipped because they had no relevant item.
    pub excluded: usize,
}

fn query_mean(result: &RankingResult, strict: bool, f: impl Fn(&RankingResult, usize) -> Option<f64>) -> Result<QueryMean> {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for q in 0..result.n_queries() {
        match f(result, q) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None if strict => return Err(Error::NoRelevant(q)),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries without relevant gallery items were excluded");
    }
    Ok(QueryMean { value: if used > 0 { sum / used as f64 } else { 0.0 }, excluded })
}

pub fn mean_average_precision(result: &RankingResult, strict: bool) -> Result<QueryMean> {
    query_mean(result, strict, average_precision)
}

pub fn mean_inverse_negative_penalty(result: &RankingResult, strict: bool) -> Result<QueryMean> {
    query_mean(result, strict, inverse_negative_penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub minp: f64,
    pub n_queries: usize,
    pub excluded_queries: usize,
}

impl MetricsReport {
    /// `R@1 <= R@5 <= R@10`.
    ///
    /// mAP and mINP have no fixed order: relevant items at ranks 2 and 3
    /// give AP = 7/12 but INP = 2/3.
    pub fn is_ordered(&self) -> bool {
        self.r1 <= self.r5 && self.r5 <= self.r10
    }
}

pub fn report(result: &RankingResult, strict: bool) -> Result<MetricsReport> {
    let map = mean_average_precision(result, strict)?;
    let minp = mean_inverse_negative_penalty(result, strict)?;
    Ok(MetricsReport {
        r1: recall_at_k(result, 1),
        r5: recall_at_k(result, 5),
        r10: recall_at_k(result, 10),
        map: map.value,
        minp: minp.value,
        n_queries: result.n_queries(),
        excluded_queries: map.excluded,
    })
}

/// Ranks `gallery` for each query and summarises the retrieval quality.
pub fn evaluate_sets(queries: &EmbeddingSet, gallery: &EmbeddingSet, truth: Option<&GroundTruth>) -> Result<MetricsReport> {
    report(&rank_gallery(queries, gallery, truth)?, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::Modality;
    use alloc::vec;

    fn single(relevant: &[usize], n: usize) -> RankingResult {
        // identity ranking; relevant given as 1-based ranks
        let rel = (0..n).map(|g| relevant.contains(&(g + 1))).collect();
        RankingResult::from_parts(vec![(0..n).collect()], vec![rel]).unwrap()
    }

    #[test]
    fn ap_and_inp_hand_cases() {
        let r = single(&[1, 3], 5);
        assert!((average_precision(&r, 0).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((inverse_negative_penalty(&r, 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let top = single(&[1, 2, 3], 6);
        assert_eq!(average_precision(&top, 0), Some(1.0));
        assert_eq!(inverse_negative_penalty(&top, 0), Some(1.0));

        let last = single(&[7], 7);
        assert!((average_precision(&last, 0).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!((inverse_negative_penalty(&last, 0).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn recall_cases() {
        let r = single(&[3], 12);
        assert_eq!(recall_at_k(&r, 1), 0.0);
        assert_eq!(recall_at_k(&r, 5), 1.0);
        assert_eq!(recall_at_k(&r, 10), 1.0);
        let none = single(&[], 4);
        assert_eq!(recall_at_k(&none, 4), 0.0);
        assert_eq!(mean_average_precision(&none, false).unwrap().excluded, 1);
        assert_eq!(mean_average_precision(&none, true), Err(Error::NoRelevant(0)));
    }

    #[test]
    fn ranking_ties_and_hand_table() {
        let scores = vec![vec![0.2, 0.9, 0.5], vec![0.7, 0.7, 0.1], vec![0.0, -1.0, 0.3]];
        let rel = vec![vec![true, false, false]; 3];
        let r = RankingResult::from_scores(&scores, rel).unwrap();
        assert_eq!(r.order(0), &[1, 2, 0]);
        assert_eq!(r.order(1), &[0, 1, 2]);
        assert_eq!(r.order(2), &[2, 0, 1]);
    }

    #[test]
    fn rank_gallery_needs_truth() {
        let q = EmbeddingSet::new(Modality::Text, Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let g = EmbeddingSet::new(Modality::Image, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(rank_gallery(&q, &g, None), Err(Error::EvalWithoutTruth));
        let gt = GroundTruth { images: vec![0, 1], texts: vec![1] };
        let r = rank_gallery(&q, &g, Some(&gt)).unwrap();
        assert_eq!(r.order(0), &[1, 0]);
        assert_eq!(r.relevance(0), &[false, true]);
        let m = report(&r, true).unwrap();
        assert_eq!((m.r1, m.map, m.minp), (1.0, 1.0, 1.0));
    }
}

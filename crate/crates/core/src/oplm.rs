//! Outlier pseudo-label mining.
//!
//! For an outlier instance `o` of one modality:
//!
//! 1. `B`: the clustered paired instances of `o` in the other modality;
//! 2. `C`: same-modality neighbours of `B` (cluster-mates by default, or
//!    feature-space k-NN), excluding `B` itself;
//! 3. `D`: the paired instances of `C` back in `o`'s modality, without `o`
//!    and without outliers;
//! 4. `o` takes the cluster of `argmax_{d in D \ U} <o, d>`, where `U`
//!    collects rejected (still-outlier) candidates.
//!
//! Image outliers are mined first, then text outliers. Pairs that still touch
//! an outlier afterwards form the supplementary training set.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::corpus::{EmbeddingSet, PairGraph};
use crate::linalg;
use crate::{Error, Modality, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NeighborMode {
    /// Every clustered instance sharing a cluster with a member of `B`.
    ClusterMates,
    /// The `k` most similar clustered instances of each member of `B`.
    Knn { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningOrder {
    ImageFirst,
    TextFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OplmConfig {
    /// Run the refined (label assignment) stage.
    pub refined: bool,
    /// Train on the leftover pairs with ITC after the mined stage.
    pub supplementary: bool,
    pub neighbor_mode: NeighborMode,
    /// Apply assignments at the end of each directional pass instead of
    /// immediately.
    pub deferred: bool,
    pub order: MiningOrder,
}

impl Default for OplmConfig {
    fn default() -> Self {
        OplmConfig {
            refined: true,
            supplementary: true,
            neighbor_mode: NeighborMode::ClusterMates,
            deferred: false,
            order: MiningOrder::ImageFirst,
        }
    }
}

impl OplmConfig {
    pub fn disabled() -> Self {
        OplmConfig { refined: false, supplementary: false, ..OplmConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub modality: Modality,
    pub id: usize,
    pub cluster: usize,
}

/// Candidates rejected for one outlier (the exclusion set).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedTrace {
    pub modality: Modality,
    pub id: usize,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub assigned: Vec<Assignment>,
    pub initial_outliers_image: usize,
    pub initial_outliers_text: usize,
    pub remaining_outliers_image: usize,
    pub remaining_outliers_text: usize,
    pub excluded_trace: Vec<ExcludedTrace>,
}

impl MiningReport {
    pub fn assigned_count(&self, modality: Modality) -> usize {
        self.assigned.iter().filter(|a| a.modality == modality).count()
    }

    fn merge(&mut self, other: MiningReport) {
        self.assigned.extend(other.assigned);
        self.excluded_trace.extend(other.excluded_trace);
    }
}

/// One directional pass mining the outliers of `anchor_modality`.
fn mine_direction(
    anchor_modality: Modality,
    anchor_set: &EmbeddingSet,
    other_set: &EmbeddingSet,
    pairs: &PairGraph,
    anchor_labels: &mut PseudoLabeling,
    other_labels: &PseudoLabeling,
    config: &OplmConfig,
) -> Result<MiningReport> {
    let other_modality = anchor_modality.other();
    let other_clusters = other_labels.clusters();
    let snapshot = anchor_labels.clone();
    let outliers: Vec<usize> = anchor_labels.outliers().collect();
    let mut report = MiningReport::default();
    let mut pending = Vec::new();

    for o in outliers {
        // 1. clustered partners
        let b: Vec<usize> =
            pairs.partners(anchor_modality, o).iter().copied().filter(|&x| other_labels.is_clustered(x)).collect();
        if b.is_empty() {
            continue;
        }
        // 2. same-modality neighbours of B
        let mut c = BTreeSet::new();
        match config.neighbor_mode {
            NeighborMode::ClusterMates => {
                for &x in &b {
                    let label = other_labels.label(x).expect("filtered to clustered");
                    c.extend(other_clusters[label].iter().copied());
                }
            }
            NeighborMode::Knn { k } => {
                for &x in &b {
                    let fx = other_set.vector(x);
                    let mut cands: Vec<(f64, usize)> = (0..other_set.count())
                        .filter(|&y| y != x && other_labels.is_clustered(y))
                        .map(|y| (linalg::dot(fx, other_set.vector(y)), y))
                        .collect();
                    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    c.extend(cands.into_iter().take(k).map(|(_, y)| y));
                }
            }
        }
        for x in &b {
            c.remove(x);
        }
        // 3. their partners back in the anchor modality
        let lookup = if config.deferred { &snapshot } else { &*anchor_labels };
        let mut d = BTreeSet::new();
        for &x in &c {
            for &y in pairs.partners(other_modality, x) {
                if y != o && (config.deferred || lookup.is_clustered(y)) {
                    d.insert(y);
                }
            }
        }
        // 4. nearest candidate with a cluster
        let fo = anchor_set.vector(o);
        let mut rejected = Vec::new();
        let mut chosen = None;
        while let Some(best) = d
            .iter()
            .copied()
            .filter(|y| !rejected.contains(y))
            .map(|y| (linalg::dot(fo, anchor_set.vector(y)), y))
            .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            })
        {
            match lookup.label(best.1) {
                Some(cluster) => {
                    chosen = Some(cluster);
                    break;
                }
                None => rejected.push(best.1),
            }
        }
        if !rejected.is_empty() {
            report.excluded_trace.push(ExcludedTrace { modality: anchor_modality, id: o, rejected });
        }
        if let Some(cluster) = chosen {
            let a = Assignment { modality: anchor_modality, id: o, cluster };
            if config.deferred {
                pending.push(a);
            } else {
                anchor_labels.assign(o, cluster)?;
                report.assigned.push(a);
            }
        }
    }
    for a in pending {
        anchor_labels.assign(a.id, a.cluster)?;
        report.assigned.push(a);
    }
    Ok(report)
}

fn check_shapes(images: &EmbeddingSet, texts: &EmbeddingSet, pairs: &PairGraph, lv: &PseudoLabeling, lt: &PseudoLabeling) -> Result<()> {
    if lv.len() != images.count() || lt.len() != texts.count() || pairs.n_images() != images.count() || pairs.n_texts() != texts.count() {
        return Err(Error::Shape("labelings, features and pair graph disagree on instance counts".into()));
    }
    Ok(())
}

/// Mines image outliers through their captions.
pub fn mine_outliers_v2t(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    pairs: &PairGraph,
    image_labels: &mut PseudoLabeling,
    text_labels: &PseudoLabeling,
    config: &OplmConfig,
) -> Result<MiningReport> {
    check_shapes(images, texts, pairs, image_labels, text_labels)?;
    let (iv, it) = (image_labels.n_outliers(), text_labels.n_outliers());
    let mut r = mine_direction(Modality::Image, images, texts, pairs, image_labels, text_labels, config)?;
    r.initial_outliers_image = iv;
    r.initial_outliers_text = it;
    r.remaining_outliers_image = image_labels.n_outliers();
    r.remaining_outliers_text = text_labels.n_outliers();
    Ok(r)
}

/// Mines text outliers through their images.
pub fn mine_outliers_t2v(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    pairs: &PairGraph,
    image_labels: &PseudoLabeling,
    text_labels: &mut PseudoLabeling,
    config: &OplmConfig,
) -> Result<MiningReport> {
    check_shapes(images, texts, pairs, image_labels, text_labels)?;
    let (iv, it) = (image_labels.n_outliers(), text_labels.n_outliers());
    let mut r = mine_direction(Modality::Text, texts, images, pairs, text_labels, image_labels, config)?;
    r.initial_outliers_image = iv;
    r.initial_outliers_text = it;
    r.remaining_outliers_image = image_labels.n_outliers();
    r.remaining_outliers_text = text_labels.n_outliers();
    Ok(r)
}

/// Refined stage: both directional passes, in the configured order.
pub fn run_refined_stage(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    pairs: &PairGraph,
    image_labels: &mut PseudoLabeling,
    text_labels: &mut PseudoLabeling,
    config: &OplmConfig,
) -> Result<MiningReport> {
    check_shapes(images, texts, pairs, image_labels, text_labels)?;
    let mut report = MiningReport {
        initial_outliers_image: image_labels.n_outliers(),
        initial_outliers_text: text_labels.n_outliers(),
        ..MiningReport::default()
    };
    let image_pass = |lv: &mut PseudoLabeling, lt: &PseudoLabeling| {
        mine_direction(Modality::Image, images, texts, pairs, lv, lt, config)
    };
    let text_pass = |lv: &PseudoLabeling, lt: &mut PseudoLabeling| {
        mine_direction(Modality::Text, texts, images, pairs, lt, lv, config)
    };
    match config.order {
        MiningOrder::ImageFirst => {
            report.merge(image_pass(image_labels, text_labels)?);
            report.merge(text_pass(image_labels, text_labels)?);
        }
        MiningOrder::TextFirst => {
            report.merge(text_pass(image_labels, text_labels)?);
            report.merge(image_pass(image_labels, text_labels)?);
        }
    }
    report.remaining_outliers_image = image_labels.n_outliers();
    report.remaining_outliers_text = text_labels.n_outliers();
    Ok(report)
}

/// Splits all pairs into `(mined, supplementary)`: a pair is supplementary
/// when either endpoint is still an outlier.
pub fn partition_two_stage(
    pairs: &PairGraph,
    image_labels: &PseudoLabeling,
    text_labels: &PseudoLabeling,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    pairs
        .pairs()
        .partition(|&(i, t)| image_labels.is_clustered(i) && text_labels.is_clustered(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::vec;

    fn set(m: Modality, rows: &[[f64; 2]]) -> EmbeddingSet {
        EmbeddingSet::new(m, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    /// Identity A: images a1 (0, clustered), a2 (1, outlier); captions
    /// t1 (0) of a1 and t2 (1) of a2 share a text cluster. Identity B: image
    /// 2 with caption 2, both clustered elsewhere.
    fn hand_trace() -> (EmbeddingSet, EmbeddingSet, PairGraph, PseudoLabeling, PseudoLabeling) {
        let images = set(Modality::Image, &[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]);
        let texts = set(Modality::Text, &[[1.0, 0.0], [0.95, 0.05], [0.0, 1.0]]);
        let pairs = PairGraph::new(3, 3, vec![vec![0], vec![1], vec![2]]).unwrap();
        let lv = PseudoLabeling::new(Modality::Image, vec![Some(0), None, Some(1)]);
        let lt = PseudoLabeling::new(Modality::Text, vec![Some(0), Some(0), Some(1)]);
        (images, texts, pairs, lv, lt)
    }

    #[test]
    fn hand_trace_assigns_cluster() {
        let (images, texts, pairs, mut lv, lt) = hand_trace();
        let r = mine_outliers_v2t(&images, &texts, &pairs, &mut lv, &lt, &OplmConfig::default()).unwrap();
        assert_eq!(r.assigned, vec![Assignment { modality: Modality::Image, id: 1, cluster: 0 }]);
        assert_eq!(lv.label(1), Some(0));
        assert_eq!(r.remaining_outliers_image, 0);
    }

    #[test]
    fn text_side_mirror() {
        // swap roles: text 1 is the outlier, images 0 and 1 share a cluster
        let (images, texts, pairs, _, _) = hand_trace();
        let lv = PseudoLabeling::new(Modality::Image, vec![Some(0), Some(0), Some(1)]);
        let mut lt = PseudoLabeling::new(Modality::Text, vec![Some(0), None, Some(1)]);
        let mut lv2 = lv.clone();
        let r = run_refined_stage(&images, &texts, &pairs, &mut lv2, &mut lt, &OplmConfig::default()).unwrap();
        assert_eq!(r.assigned, vec![Assignment { modality: Modality::Text, id: 1, cluster: 0 }]);
        assert_eq!(lv2, lv);
    }

    #[test]
    fn outlier_captions_block_mining() {
        let (images, texts, pairs, mut lv, _) = hand_trace();
        let lt = PseudoLabeling::new(Modality::Text, vec![Some(0), None, Some(1)]);
        let r = mine_outliers_v2t(&images, &texts, &pairs, &mut lv, &lt, &OplmConfig::default()).unwrap();
        assert!(r.assigned.is_empty());
        assert_eq!(lv.label(1), None);
    }

    #[test]
    fn cluster_mates_pair_only_to_outliers() {
        let (images, texts, pairs, _, lt) = hand_trace();
        let mut lv = PseudoLabeling::new(Modality::Image, vec![None, None, Some(0)]);
        let r = mine_outliers_v2t(&images, &texts, &pairs, &mut lv, &lt, &OplmConfig::default()).unwrap();
        assert!(r.assigned.is_empty());
        assert_eq!(lv.n_outliers(), 2);
    }

    #[test]
    fn deferred_records_rejections() {
        let (images, texts, pairs, _, lt) = hand_trace();
        let mut lv = PseudoLabeling::new(Modality::Image, vec![None, None, Some(0)]);
        let cfg = OplmConfig { deferred: true, ..OplmConfig::default() };
        let r = mine_outliers_v2t(&images, &texts, &pairs, &mut lv, &lt, &cfg).unwrap();
        assert!(r.assigned.is_empty());
        assert_eq!(r.excluded_trace.len(), 2);
        assert_eq!(r.excluded_trace[0].rejected, vec![1]);
    }

    #[test]
    fn partition_cases() {
        let pairs = PairGraph::new(2, 3, vec![vec![0, 1], vec![2]]).unwrap();
        let lv = PseudoLabeling::new(Modality::Image, vec![None, Some(0)]);
        let lt = PseudoLabeling::new(Modality::Text, vec![Some(0), Some(0), Some(0)]);
        let (mined, supp) = partition_two_stage(&pairs, &lv, &lt);
        assert_eq!(mined, vec![(1, 2)]);
        assert_eq!(supp, vec![(0, 0), (0, 1)]);

        let none = PseudoLabeling::new(Modality::Image, vec![None, None]);
        assert!(partition_two_stage(&pairs, &none, &lt).0.is_empty());
    }
}

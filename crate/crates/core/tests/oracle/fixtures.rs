//! Constructed corpora and labelings shared by several test files.

use cpcl_core::clustering::PseudoLabeling;
use cpcl_core::corpus::{synth_corpus, Corpus, EmbeddingSet, PairGraph, SynthSpec};
use cpcl_core::linalg::Matrix;
use cpcl_core::Modality;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct MiningCase {
    pub images: EmbeddingSet,
    pub texts: EmbeddingSet,
    pub pairs: PairGraph,
    pub image_labels: PseudoLabeling,
    pub text_labels: PseudoLabeling,
}

fn set(m: Modality, rows: &[[f64; 2]]) -> EmbeddingSet {
    EmbeddingSet::new(m, Matrix::from_rows(rows).unwrap()).unwrap()
}

/// Identity A: images a1 (0, clustered in C0) and a2 (1, outlier); a2's
/// caption t2 (1) shares a text cluster with a1's caption t1 (0). Identity
/// B: image 2 and caption 2, clustered on their own. Mining must give a2 C0.
pub fn hand_trace() -> MiningCase {
    MiningCase {
        images: set(Modality::Image, &[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]),
        texts: set(Modality::Text, &[[1.0, 0.0], [0.95, 0.05], [0.0, 1.0]]),
        pairs: PairGraph::new(3, 3, vec![vec![0], vec![1], vec![2]]).unwrap(),
        image_labels: PseudoLabeling::new(Modality::Image, vec![Some(0), None, Some(1)]),
        text_labels: PseudoLabeling::new(Modality::Text, vec![Some(0), Some(0), Some(1)]),
    }
}

/// Random pairing, features and labelings with plenty of outliers.
pub fn random_mining_case(rng: &mut ChaCha8Rng) -> MiningCase {
    let n_images = rng.random_range(2..=30);
    let mut lists = Vec::with_capacity(n_images);
    let mut n_texts = 0;
    for _ in 0..n_images {
        let k = rng.random_range(1..=3);
        lists.push((n_texts..n_texts + k).collect());
        n_texts += k;
    }
    let labels = |n: usize, rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..=5);
        let p = rng.random_range(0.1..0.7);
        (0..n).map(|_| (!rng.random_bool(p)).then(|| rng.random_range(0..k))).collect::<Vec<_>>()
    };
    let lv = labels(n_images, rng);
    let lt = labels(n_texts, rng);
    MiningCase {
        images: EmbeddingSet::new(Modality::Image, super::unit_matrix(rng, n_images, 4)).unwrap(),
        texts: EmbeddingSet::new(Modality::Text, super::unit_matrix(rng, n_texts, 4)).unwrap(),
        pairs: PairGraph::new(n_images, n_texts, lists).unwrap(),
        image_labels: PseudoLabeling::new(Modality::Image, lv),
        text_labels: PseudoLabeling::new(Modality::Text, lt),
    }
}

pub struct PlantedCase {
    pub case: MiningCase,
    /// (planted outlier image, cluster of its identity's other images)
    pub planted: Vec<(usize, usize)>,
}

/// Synthetic corpus labelled by its planted identities, after which the
/// first image of every identity is forced to be an outlier. Captions keep
/// their identity cluster, so every planted image has a correct answer.
pub fn planted_outliers(n_identities: usize, images_per_id: usize, noise: f64, seed: u64) -> (Corpus, PlantedCase) {
    assert!(images_per_id >= 2);
    let spec = SynthSpec {
        n_identities,
        images_per_id,
        texts_per_image: 2,
        dim: 64,
        intra_id_noise: noise,
        modality_offset_scale: 0.1,
        outlier_fraction: 0.0,
        seed,
    };
    let corpus = synth_corpus(&spec).unwrap();
    let gt = corpus.ground_truth.clone().unwrap();
    let mut lv = PseudoLabeling::new(Modality::Image, gt.images.iter().map(|&c| Some(c)).collect());
    let lt = PseudoLabeling::new(Modality::Text, gt.texts.iter().map(|&c| Some(c)).collect());
    let planted_ids: Vec<usize> = (0..n_identities).map(|id| id * images_per_id).collect();
    for &img in &planted_ids {
        lv.mark_outlier(img);
    }
    let planted = planted_ids.iter().map(|&img| (img, lv.label(img + 1).unwrap())).collect();
    let case = MiningCase {
        images: corpus.images.clone(),
        texts: corpus.texts.clone(),
        pairs: corpus.pairs.clone(),
        image_labels: lv,
        text_labels: lt,
    };
    (corpus, PlantedCase { case, planted })
}

mod oracle;

use std::collections::BTreeSet;

use cpcl_core::oplm::{partition_two_stage, run_refined_stage, Assignment, MiningOrder, NeighborMode, OplmConfig};
use cpcl_core::Modality;
use oracle::fixtures::{self, MiningCase};

fn configs() -> Vec<OplmConfig> {
    let mut out = Vec::new();
    for deferred in [false, true] {
        for order in [MiningOrder::ImageFirst, MiningOrder::TextFirst] {
            for neighbor_mode in [NeighborMode::ClusterMates, NeighborMode::Knn { k: 3 }] {
                out.push(OplmConfig { deferred, order, neighbor_mode, ..OplmConfig::default() });
            }
        }
    }
    out
}

#[test]
fn refined_stage_is_monotone_conservative_and_invents_no_labels() {
    let mut rng = oracle::rng(41);
    let configs = configs();
    for run in 0..100 {
        let mut c = fixtures::random_mining_case(&mut rng);
        let cfg = &configs[run % configs.len()];
        let before = (c.image_labels.clone(), c.text_labels.clone());
        let r = run_refined_stage(&c.images, &c.texts, &c.pairs, &mut c.image_labels, &mut c.text_labels, cfg)
            .unwrap();
        assert!(r.remaining_outliers_image <= r.initial_outliers_image);
        assert!(r.remaining_outliers_text <= r.initial_outliers_text);
        assert_eq!(r.initial_outliers_image, before.0.n_outliers());
        assert_eq!(r.initial_outliers_text, before.1.n_outliers());
        assert_eq!(r.assigned_count(Modality::Image) + r.remaining_outliers_image, r.initial_outliers_image);
        assert_eq!(r.assigned_count(Modality::Text) + r.remaining_outliers_text, r.initial_outliers_text);
        // clustered instances keep their labels; new labels already existed
        for (old, new) in [(&before.0, &c.image_labels), (&before.1, &c.text_labels)] {
            assert_eq!(old.n_clusters(), new.n_clusters());
            for i in 0..old.len() {
                match old.label(i) {
                    Some(l) => assert_eq!(new.label(i), Some(l)),
                    None => assert!(new.label(i).is_none_or(|l| l < old.n_clusters())),
                }
            }
        }
        for Assignment { modality, id, cluster } in &r.assigned {
            let labels = if *modality == Modality::Image { &c.image_labels } else { &c.text_labels };
            assert_eq!(labels.label(*id), Some(*cluster));
        }
    }
}

#[test]
fn refined_stage_reaches_a_fixpoint() {
    let mut rng = oracle::rng(42);
    for _ in 0..50 {
        let MiningCase { images, texts, pairs, mut image_labels, mut text_labels } =
            fixtures::random_mining_case(&mut rng);
        let cfg = OplmConfig::default();
        let mut rounds = 0;
        loop {
            let before = image_labels.n_outliers() + text_labels.n_outliers();
            let r = run_refined_stage(&images, &texts, &pairs, &mut image_labels, &mut text_labels, &cfg).unwrap();
            rounds += 1;
            if r.assigned.is_empty() {
                break;
            }
            // only outliers can be assigned, so this terminates
            assert!(image_labels.n_outliers() + text_labels.n_outliers() < before);
            assert!(rounds <= 60);
        }
        let snapshot = (image_labels.clone(), text_labels.clone());
        let r = run_refined_stage(&images, &texts, &pairs, &mut image_labels, &mut text_labels, &cfg).unwrap();
        assert!(r.assigned.is_empty());
        assert_eq!((image_labels, text_labels), snapshot);
    }
}

#[test]
fn hand_trace_assigns_expected_cluster() {
    let MiningCase { images, texts, pairs, mut image_labels, mut text_labels } = fixtures::hand_trace();
    let r = run_refined_stage(&images, &texts, &pairs, &mut image_labels, &mut text_labels, &OplmConfig::default())
        .unwrap();
    assert_eq!(r.assigned, vec![Assignment { modality: Modality::Image, id: 1, cluster: 0 }]);
}

#[test]
fn planted_outliers_are_recovered() {
    let (_, planted) = fixtures::planted_outliers(120, 3, 0.03, 5);
    let MiningCase { images, texts, pairs, mut image_labels, mut text_labels } = planted.case;
    assert_eq!(planted.planted.len(), 120);
    run_refined_stage(&images, &texts, &pairs, &mut image_labels, &mut text_labels, &OplmConfig::default()).unwrap();
    let hits = planted.planted.iter().filter(|&&(img, c)| image_labels.label(img) == Some(c)).count();
    let rate = hits as f64 / planted.planted.len() as f64;
    assert!(rate >= 0.95, "recovered {hits}/{}", planted.planted.len());
}

#[test]
fn partition_covers_all_pairs_disjointly() {
    let mut rng = oracle::rng(43);
    for _ in 0..50 {
        let c = fixtures::random_mining_case(&mut rng);
        let (mined, supp) = partition_two_stage(&c.pairs, &c.image_labels, &c.text_labels);
        let a: BTreeSet<_> = mined.iter().copied().collect();
        let b: BTreeSet<_> = supp.iter().copied().collect();
        assert_eq!(a.len(), mined.len());
        assert!(a.is_disjoint(&b));
        let all: BTreeSet<_> = c.pairs.pairs().collect();
        assert_eq!(a.union(&b).copied().collect::<BTreeSet<_>>(), all);
        for &(i, t) in &supp {
            assert!(!c.image_labels.is_clustered(i) || !c.text_labels.is_clustered(t));
        }
    }
    // remaining outlier image with two captions: exactly its two pairs
    let mut c = fixtures::random_mining_case(&mut rng);
    let all_clustered = |n| cpcl_core::clustering::PseudoLabeling::new(Modality::Text, vec![Some(0); n]);
    c.text_labels = all_clustered(c.texts.count());
    let mut lv = vec![Some(0); c.images.count()];
    let target = (0..c.images.count()).find(|&i| c.pairs.texts_of(i).len() == 2);
    if let Some(t) = target {
        lv[t] = None;
        let lv = cpcl_core::clustering::PseudoLabeling::new(Modality::Image, lv);
        let (_, supp) = partition_two_stage(&c.pairs, &lv, &c.text_labels);
        assert_eq!(supp.len(), 2);
        assert!(supp.iter().all(|p| p.0 == t));
    }
}

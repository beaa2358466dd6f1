mod oracle;

use cpcl_core::clustering::PseudoLabeling;
use cpcl_core::corpus::PairGraph;
use cpcl_core::hcm::{self, build_match_matrix, Batch, LossConfig, MatchMatrix, PcmVariant};
use cpcl_core::linalg::Matrix;
use cpcl_core::pmm::PrototypeMemory;
use cpcl_core::{Error, Modality};
use oracle::{LossCase, LossKind, ALL_LOSSES};
use proptest::prelude::*;
use rand::Rng;

const E_RATIO: f64 = 0.313_261_687_518_222_8; // ln(1 + 1/e)

fn memory(modality: Modality, rows: &[[f64; 2]], tau: f64) -> PrototypeMemory {
    PrototypeMemory::from_prototypes(modality, Matrix::from_rows(rows).unwrap(), 0.9, tau).unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = oracle::rng(11);
    for &tau in &[0.05, 0.07, 0.5] {
        for _ in 0..8 {
            let b = rng.random_range(2..=8);
            let d = rng.random_range(4..=16);
            let case = LossCase::random(&mut rng, b, d, tau);
            for kind in ALL_LOSSES {
                let err = case.grad_check(kind);
                assert!(err < 1e-4, "{kind:?} B={b} D={d} tau={tau}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn values_match_naive_formulas() {
    let mut rng = oracle::rng(12);
    for _ in 0..30 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(4..=16);
        let tau = [0.1, 0.3, 1.0][rng.random_range(0..3)];
        let case = LossCase::random(&mut rng, b, d, tau);
        let close = |a: f64, e: f64| (a - e).abs() <= 1e-10 * e.abs().max(1.0);
        assert!(close(case.eval(LossKind::PcmCross).value, oracle::naive_pcm_cross(&case)));
        assert!(close(case.eval(LossKind::PcmSingle).value, oracle::naive_pcm_single(&case)));
        assert!(close(case.eval(LossKind::Itc).value, oracle::naive_itc(&case.image, &case.text, tau)));
        assert!(close(
            case.eval(LossKind::Icpm).value,
            oracle::naive_icpm(&case.image, &case.text, &case.matches, tau, 1e-8)
        ));
    }
}

#[test]
fn single_prototype_pcm_is_zero() {
    let batch = Batch::new(
        Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
        Matrix::from_rows(&[[0.6, 0.8], [0.8, 0.6]]).unwrap(),
        vec![0, 1],
        vec![0, 1],
        vec![Some(0), Some(0)],
        vec![Some(0), Some(0)],
    )
    .unwrap();
    let im = memory(Modality::Image, &[[0.0, 1.0]], 0.07);
    let tm = memory(Modality::Text, &[[1.0, 0.0]], 0.07);
    for out in [hcm::pcm_cross(&batch, &tm, &im).unwrap(), hcm::pcm_single(&batch, &im, &tm).unwrap()] {
        assert_eq!(out.value, 0.0);
        assert!(out.grad_image.as_slice().iter().chain(out.grad_text.as_slice()).all(|&g| g == 0.0));
    }
}

#[test]
fn uniform_logits_give_log_of_prototype_count() {
    // every feature is orthogonal to every prototype
    let f = Matrix::from_rows(&[[0.0, 0.0, 1.0]]).unwrap();
    let batch = Batch::new(f.clone(), f, vec![0], vec![0], vec![Some(1)], vec![Some(2)]).unwrap();
    let im = PrototypeMemory::from_prototypes(
        Modality::Image,
        Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
        0.9,
        0.07,
    )
    .unwrap();
    let tm = PrototypeMemory::from_prototypes(
        Modality::Text,
        Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0]]).unwrap(),
        0.9,
        0.07,
    )
    .unwrap();
    let out = hcm::pcm_cross(&batch, &tm, &im).unwrap();
    assert!((out.value - (3f64.ln() + 2f64.ln())).abs() < 1e-12);
}

#[test]
fn pcm_single_closed_form() {
    let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let t = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
    let batch = Batch::new(f, t, vec![0], vec![0], vec![Some(0)], vec![Some(1)]).unwrap();
    let im = memory(Modality::Image, &[[1.0, 0.0], [0.0, 1.0]], 1.0);
    let tm = memory(Modality::Text, &[[1.0, 0.0], [0.0, 1.0]], 1.0);
    let out = hcm::pcm_single(&batch, &im, &tm).unwrap();
    assert!((out.value - 2.0 * E_RATIO).abs() < 1e-12, "{}", out.value);
    assert!((E_RATIO - 0.3133).abs() < 1e-4);
}

#[test]
fn itc_orthogonal_pair_case() {
    let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let batch = Batch::from_features(eye.clone(), eye).unwrap();
    let out = hcm::itc(&batch, 1.0).unwrap();
    assert!((out.value - 2.0 * E_RATIO).abs() < 1e-12);
    assert!((out.value - 0.6266).abs() < 1e-4);
}

#[test]
fn itc_equal_similarities_give_log_batch() {
    let f = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
    let batch = Batch::from_features(f.clone(), f).unwrap();
    let out = hcm::itc(&batch, 0.07).unwrap();
    assert!((out.value - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn icpm_identical_distributions() {
    let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let batch = Batch::from_features(f.clone(), f).unwrap();
    let out = hcm::icpm(&batch, &MatchMatrix::identity(1), 0.07, 1e-8).unwrap();
    assert!(out.value.abs() < 1e-7);
}

#[test]
fn icpm_two_item_oracle() {
    // diagonal similarity +s, off-diagonal -s, s / tau = 3
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let image = Matrix::from_rows(&[[s, s], [-s, s]]).unwrap();
    let text = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    let batch = Batch::from_features(image, text).unwrap();
    let tau = s / 3.0;
    let eps = 1e-8;
    let out = hcm::icpm(&batch, &MatchMatrix::identity(2), tau, eps).unwrap();
    // p = [e^3, e^-3] / (e^3 + e^-3) per anchor, q = [1, 0]
    let p1 = 1.0 / (1.0 + (-6f64).exp());
    let p2 = 1.0 - p1;
    let per_anchor = p1 * (p1 / (1.0 + eps)).ln() + p2 * (p2 / eps).ln();
    assert!((out.value - 2.0 * per_anchor).abs() < 1e-10, "{} vs {}", out.value, 2.0 * per_anchor);
}

#[test]
fn icpm_rejects_empty_match_row() {
    let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let batch = Batch::from_features(eye.clone(), eye).unwrap();
    let m = MatchMatrix::from_fn(2, |i, j| i == 0 && j == 0);
    assert!(matches!(hcm::icpm(&batch, &m, 0.07, 1e-8), Err(Error::DegenerateMatch { .. })));
}

#[test]
fn itc_needs_two_items() {
    let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let batch = Batch::from_features(f.clone(), f).unwrap();
    assert!(matches!(hcm::itc(&batch, 0.07), Err(Error::EmptyBatch(_))));
}

#[test]
fn losses_stay_finite_at_smallest_temperature() {
    let mut rng = oracle::rng(13);
    for _ in 0..20 {
        let b = rng.random_range(2..=8);
        let case = LossCase::random(&mut rng, b, 8, 0.005);
        for kind in ALL_LOSSES {
            let out = case.eval(kind);
            assert!(out.is_finite() && out.grad_temperature.image.is_finite(), "{kind:?}");
            assert!(out.value >= -1e-7, "{kind:?}: {}", out.value);
        }
    }
}

#[test]
fn overall_loss_is_additive() {
    let mut rng = oracle::rng(14);
    for _ in 0..20 {
        let b = rng.random_range(2..=8);
        let case = LossCase::random(&mut rng, b, 6, 0.07);
        let batch = case.batch();
        let (im, tm) = case.memories(case.taus);
        for variant in [PcmVariant::Cross, PcmVariant::Single] {
            let cfg = |use_pcm, use_icpm| LossConfig { use_pcm, use_icpm, pcm_variant: variant, ..LossConfig::default() };
            let run = |c: LossConfig| hcm::overall_loss_with_match(&batch, &im, &tm, &case.matches, &c).unwrap();
            let both = run(cfg(true, true));
            let pcm = run(cfg(true, false));
            let icpm = run(cfg(false, true));
            let none = run(cfg(false, false));
            let direct_pcm = match variant {
                PcmVariant::Cross => hcm::pcm_cross(&batch, &tm, &im).unwrap(),
                PcmVariant::Single => hcm::pcm_single(&batch, &im, &tm).unwrap(),
            };
            assert_eq!(pcm, direct_pcm);
            assert_eq!(icpm, hcm::icpm(&batch, &case.matches, 0.07, 1e-8).unwrap());
            assert_eq!(none.value, 0.0);
            assert!(none.grad_image.as_slice().iter().all(|&g| g == 0.0));
            assert!((both.value - (pcm.value + icpm.value)).abs() <= 1e-12);
            let sum_grads = pcm.grad_image.as_slice().iter().zip(icpm.grad_image.as_slice()).map(|(a, b)| a + b);
            for (g, s) in both.grad_image.as_slice().iter().zip(sum_grads) {
                assert!((g - s).abs() <= 1e-12);
            }
        }
    }
}

fn labels(modality: Modality, l: &[Option<usize>]) -> PseudoLabeling {
    PseudoLabeling::new(modality, l.to_vec())
}

#[test]
fn match_matrix_rules() {
    // images 0,1 (identity A) and 2,3 (identity B); one caption each
    let pairs = PairGraph::new(4, 4, vec![vec![0], vec![1], vec![2], vec![3]]).unwrap();
    let lv = labels(Modality::Image, &[Some(0), Some(0), Some(1), Some(1)]);
    let lt = labels(Modality::Text, &[Some(0), Some(0), Some(1), Some(1)]);
    let f = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
    let batch =
        Batch::new(f.clone(), f.clone(), vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![None; 4], vec![None; 4]).unwrap();
    let m = build_match_matrix(&batch, &lv, &lt, &pairs);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m.get(i, j), i / 2 == j / 2, "({i},{j})");
        }
    }

    // nothing shared: identity
    let lv = labels(Modality::Image, &[None; 4]);
    let lt = labels(Modality::Text, &[None; 4]);
    let m = build_match_matrix(&batch, &lv, &lt, &pairs);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m.get(i, j), i == j);
        }
    }

    // two captions of the same image in one batch
    let pairs = PairGraph::new(1, 2, vec![vec![0, 1]]).unwrap();
    let f2 = Matrix::from_rows(&[[1.0, 0.0]; 2]).unwrap();
    let batch = Batch::new(f2.clone(), f2, vec![0, 0], vec![0, 1], vec![None; 2], vec![None; 2]).unwrap();
    let m = build_match_matrix(&batch, &labels(Modality::Image, &[None]), &labels(Modality::Text, &[None, None]), &pairs);
    assert!((0..2).all(|i| (0..2).all(|j| m.get(i, j))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), b in 2usize..8, tau in 0.005f64..1.0) {
        // ITC gradients are (p - onehot) / (B tau) scaled features, so each
        // row of p sums to one iff each row of the logit gradient sums to 0.
        let mut rng = oracle::rng(seed);
        let case = LossCase::random(&mut rng, b, 4, tau);
        let batch = case.batch();
        let sims = batch.image_features.gram(&batch.text_features);
        for i in 0..b {
            let row: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let total: f64 = row.iter().map(|x| (x - m).exp() / z).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        let out = hcm::itc(&batch, tau).unwrap();
        prop_assert!(out.is_finite());
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>(), b in 2usize..8, d in 4usize..16) {
        let mut rng = oracle::rng(seed);
        let case = LossCase::random(&mut rng, b, d, 0.07);
        for kind in ALL_LOSSES {
            prop_assert!(case.eval(kind).value >= -1e-7);
        }
    }
}

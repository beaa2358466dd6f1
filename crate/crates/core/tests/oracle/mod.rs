//! Reference implementations used as test oracles: finite differences,
//! naive loss formulas, brute-force DBSCAN and ranking metrics.
#![allow(dead_code)]

pub mod fixtures;

use std::collections::BTreeSet;

use cpcl_core::hcm::{self, Batch, LossConfig, LossOutput, MatchMatrix, PcmVariant};
use cpcl_core::linalg::Matrix;
use cpcl_core::pmm::PrototypeMemory;
use cpcl_core::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn unit_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(rng, d)).collect();
    Matrix::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------------------
// losses

/// Denominator floor of the relative error, so that entries whose true value
/// is essentially zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    PcmCross,
    PcmSingle,
    Icpm,
    Itc,
    Overall,
    OverallSingle,
}

pub const ALL_LOSSES: [LossKind; 6] = [
    LossKind::PcmCross,
    LossKind::PcmSingle,
    LossKind::Icpm,
    LossKind::Itc,
    LossKind::Overall,
    LossKind::OverallSingle,
];

/// A random loss evaluation point.
#[derive(Debug, Clone)]
pub struct LossCase {
    pub image: Matrix,
    pub text: Matrix,
    pub image_cluster: Vec<Option<usize>>,
    pub text_cluster: Vec<Option<usize>>,
    pub image_protos: Matrix,
    pub text_protos: Matrix,
    pub matches: MatchMatrix,
    /// `[image memory, text memory, instance]` temperatures.
    pub taus: [f64; 3],
}

impl LossCase {
    pub fn random(rng: &mut ChaCha8Rng, b: usize, d: usize, tau: f64) -> Self {
        let nv = rng.random_range(2..=7);
        let nt = rng.random_range(2..=7);
        let pick = |n: usize, rng: &mut ChaCha8Rng, i: usize| {
            (i == 0 || rng.random_bool(0.8)).then(|| rng.random_range(0..n))
        };
        let image_cluster = (0..b).map(|i| pick(nv, rng, i)).collect();
        let text_cluster = (0..b).map(|i| pick(nt, rng, i)).collect();
        let mut matches = MatchMatrix::identity(b);
        for i in 0..b {
            for j in 0..b {
                if i != j && rng.random_bool(0.25) {
                    matches.set(i, j, true);
                }
            }
        }
        LossCase {
            image: unit_matrix(rng, b, d),
            text: unit_matrix(rng, b, d),
            image_cluster,
            text_cluster,
            image_protos: unit_matrix(rng, nv, d),
            text_protos: unit_matrix(rng, nt, d),
            matches,
            taus: [tau; 3],
        }
    }

    pub fn batch_with(&self, image: Matrix, text: Matrix) -> Batch {
        let b = image.rows();
        Batch::new(image, text, (0..b).collect(), (0..b).collect(), self.image_cluster.clone(), self.text_cluster.clone())
            .unwrap()
    }

    pub fn batch(&self) -> Batch {
        self.batch_with(self.image.clone(), self.text.clone())
    }

    pub fn memories(&self, taus: [f64; 3]) -> (PrototypeMemory, PrototypeMemory) {
        (
            PrototypeMemory::from_prototypes(Modality::Image, self.image_protos.clone(), 0.9, taus[0]).unwrap(),
            PrototypeMemory::from_prototypes(Modality::Text, self.text_protos.clone(), 0.9, taus[1]).unwrap(),
        )
    }

    pub fn eval_at(&self, kind: LossKind, image: &Matrix, text: &Matrix, taus: [f64; 3]) -> LossOutput {
        let batch = self.batch_with(image.clone(), text.clone());
        let (im, tm) = self.memories(taus);
        let config = |variant| LossConfig { pcm_variant: variant, icpm_temperature: taus[2], ..LossConfig::default() };
        match kind {
            LossKind::PcmCross => hcm::pcm_cross(&batch, &tm, &im),
            LossKind::PcmSingle => hcm::pcm_single(&batch, &im, &tm),
            LossKind::Icpm => hcm::icpm(&batch, &self.matches, taus[2], 1e-8),
            LossKind::Itc => hcm::itc(&batch, taus[2]),
            LossKind::Overall => {
                hcm::overall_loss_with_match(&batch, &im, &tm, &self.matches, &config(PcmVariant::Cross))
            }
            LossKind::OverallSingle => {
                hcm::overall_loss_with_match(&batch, &im, &tm, &self.matches, &config(PcmVariant::Single))
            }
        }
        .unwrap()
    }

    pub fn eval(&self, kind: LossKind) -> LossOutput {
        self.eval_at(kind, &self.image, &self.text, self.taus)
    }

    /// Largest relative error between the analytic gradient and central
    /// differences, over every feature coordinate and every temperature.
    pub fn grad_check(&self, kind: LossKind) -> f64 {
        let analytic = self.eval(kind);
        let h = FD_STEP;
        let value = |image: &Matrix, text: &Matrix, taus: [f64; 3]| self.eval_at(kind, image, text, taus).value;
        let mut worst: f64 = 0.0;
        for (side, grad) in [(0, &analytic.grad_image), (1, &analytic.grad_text)] {
            let base = if side == 0 { &self.image } else { &self.text };
            for k in 0..base.as_slice().len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.as_mut_slice()[k] += h;
                minus.as_mut_slice()[k] -= h;
                let (fp, fm) = if side == 0 {
                    (value(&plus, &self.text, self.taus), value(&minus, &self.text, self.taus))
                } else {
                    (value(&self.image, &plus, self.taus), value(&self.image, &minus, self.taus))
                };
                worst = worst.max(rel_err(grad.as_slice()[k], (fp - fm) / (2.0 * h)));
            }
        }
        let g = analytic.grad_temperature;
        for (t, a) in [g.image, g.text, g.instance].into_iter().enumerate() {
            let mut plus = self.taus;
            let mut minus = self.taus;
            plus[t] += h;
            minus[t] -= h;
            let n = (value(&self.image, &self.text, plus) - value(&self.image, &self.text, minus)) / (2.0 * h);
            worst = worst.max(rel_err(a, n));
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log softmax(logits)[pos]` without max subtraction.
fn naive_ce(logits: &[f64], pos: usize) -> f64 {
    -(logits[pos].exp() / logits.iter().map(|z| z.exp()).sum::<f64>()).ln()
}

fn naive_proto_term(features: &Matrix, positives: &[Option<usize>], protos: &Matrix, tau: f64) -> f64 {
    let items: Vec<f64> = (0..features.rows())
        .filter_map(|i| {
            positives[i].map(|p| {
                let logits: Vec<f64> = protos.iter_rows().map(|c| dot(features.row(i), c) / tau).collect();
                naive_ce(&logits, p)
            })
        })
        .collect();
    if items.is_empty() {
        0.0
    } else {
        items.iter().sum::<f64>() / items.len() as f64
    }
}

pub fn naive_pcm_cross(c: &LossCase) -> f64 {
    naive_proto_term(&c.image, &c.text_cluster, &c.text_protos, c.taus[0])
        + naive_proto_term(&c.text, &c.image_cluster, &c.image_protos, c.taus[1])
}

pub fn naive_pcm_single(c: &LossCase) -> f64 {
    naive_proto_term(&c.image, &c.image_cluster, &c.image_protos, c.taus[0])
        + naive_proto_term(&c.text, &c.text_cluster, &c.text_protos, c.taus[1])
}

pub fn naive_itc(image: &Matrix, text: &Matrix, tau: f64) -> f64 {
    let b = image.rows();
    let v2t: f64 = (0..b)
        .map(|i| naive_ce(&(0..b).map(|j| dot(image.row(i), text.row(j)) / tau).collect::<Vec<_>>(), i))
        .sum();
    let t2v: f64 = (0..b)
        .map(|i| naive_ce(&(0..b).map(|j| dot(text.row(i), image.row(j)) / tau).collect::<Vec<_>>(), i))
        .sum();
    (v2t + t2v) / b as f64
}

pub fn naive_icpm(image: &Matrix, text: &Matrix, matches: &MatchMatrix, tau: f64, eps: f64) -> f64 {
    let b = image.rows();
    let direction = |a: &Matrix, o: &Matrix, y: &dyn Fn(usize, usize) -> bool| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let e: Vec<f64> = (0..b).map(|j| (dot(a.row(i), o.row(j)) / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            let ny = (0..b).filter(|&j| y(i, j)).count() as f64;
            for j in 0..b {
                let p = e[j] / z;
                let q = if y(i, j) { 1.0 / ny } else { 0.0 };
                total += p * (p / (q + eps)).ln();
            }
        }
        total / b as f64
    };
    direction(image, text, &|i, j| matches.get(i, j)) + direction(text, image, &|i, j| matches.get(j, i))
}

// ---------------------------------------------------------------------------
// clustering

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// DBSCAN from its definition: core points, connected components of the
/// core graph, borders to the component of their lowest-id core neighbour.
pub fn reference_dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = dist.len();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| dist[i][j] <= eps).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && dist[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(find(&mut parent, i))
            } else {
                (0..n).find(|&j| core[j] && dist[i][j] <= eps).map(|j| find(&mut parent, j))
            }
        })
        .collect()
}

/// Clusters as sets of members, independent of cluster numbering.
pub fn partition(labels: &[Option<usize>]) -> BTreeSet<BTreeSet<usize>> {
    let ids: BTreeSet<usize> = labels.iter().flatten().copied().collect();
    ids.into_iter()
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == Some(c)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// metrics

/// AP by exhaustive scan: for every relevant item, the precision at its rank.
pub fn reference_ap(order: &[usize], relevance: &[bool]) -> Option<f64> {
    let relevant: Vec<usize> = (0..relevance.len()).filter(|&g| relevance[g]).collect();
    if relevant.is_empty() {
        return None;
    }
    let rank_of = |g: usize| order.iter().position(|&x| x == g).unwrap() + 1;
    let sum: f64 = relevant
        .iter()
        .map(|&g| {
            let r = rank_of(g);
            let hits = relevant.iter().filter(|&&h| rank_of(h) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(sum / relevant.len() as f64)
}

/// INP by exhaustive scan: number of relevant items over the rank of the
/// worst-ranked one.
pub fn reference_inp(order: &[usize], relevance: &[bool]) -> Option<f64> {
    let relevant: Vec<usize> = (0..relevance.len()).filter(|&g| relevance[g]).collect();
    let hardest = relevant.iter().map(|&g| order.iter().position(|&x| x == g).unwrap() + 1).max()?;
    Some(relevant.len() as f64 / hardest as f64)
}

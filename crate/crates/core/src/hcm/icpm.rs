use alloc::vec;
use alloc::vec::Vec;

use super::{Batch, LossOutput};
use crate::clustering::PseudoLabeling;
use crate::corpus::PairGraph;
use crate::linalg;
use crate::math;
use crate::{Error, Result};

/// `B x B` boolean matrix; entry `(i, j)` says image `i` and caption `j` of
/// the batch are a pseudo-positive pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMatrix {
    n: usize,
    data: Vec<bool>,
}

impl MatchMatrix {
    pub fn identity(n: usize) -> Self {
        let mut m = MatchMatrix { n, data: vec![false; n * n] };
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        MatchMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.n + j] = v;
    }

    fn row_count(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.get(i, j)).count()
    }

    fn col_count(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.get(i, j)).count()
    }
}

/// Pseudo-positive pairs inside a batch.
///
/// `(i, j)` matches when `i == j`, when caption `j` is paired with image `i`
/// or shares a text cluster with one of image `i`'s captions, or when image
/// `i` is paired with caption `j` or shares an image cluster with one of
/// caption `j`'s images.
pub fn build_match_matrix(
    batch: &Batch,
    image_labels: &PseudoLabeling,
    text_labels: &PseudoLabeling,
    pairs: &PairGraph,
) -> MatchMatrix {
    let n = batch.len();
    MatchMatrix::from_fn(n, |i, j| {
        if i == j {
            return true;
        }
        let (img, txt) = (batch.image_ids[i], batch.text_ids[j]);
        let txt_label = text_labels.label(txt);
        let via_text = pairs
            .texts_of(img)
            .iter()
            .any(|&c| c == txt || (txt_label.is_some() && text_labels.label(c) == txt_label));
        if via_text {
            return true;
        }
        let img_label = image_labels.label(img);
        pairs
            .images_of(txt)
            .iter()
            .any(|&v| v == img || (img_label.is_some() && image_labels.label(v) == img_label))
    })
}

/// Accumulates one KL direction. `score(i, j)` is the similarity of anchor
/// `i` with candidate `j`; `target(i, j)` the match indicator. Returns
/// `(value, dL/dsim)` with the `1/N` already applied.
fn kl_direction(
    n: usize,
    tau: f64,
    eps: f64,
    score: impl Fn(usize, usize) -> f64,
    target: impl Fn(usize, usize) -> bool,
) -> (f64, Vec<f64>) {
    let inv_n = 1.0 / n as f64;
    let mut dsim = vec![0.0; n * n];
    let mut logits = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            logits[j] = score(i, j) / tau;
        }
        let lse = math::log_sum_exp(&logits);
        math::softmax_into(&logits, &mut p);
        let positives = (0..n).filter(|&j| target(i, j)).count() as f64;
        let mut mean_g = 0.0;
        for j in 0..n {
            let q = if target(i, j) { 1.0 / positives } else { 0.0 };
            g[j] = (logits[j] - lse) - math::ln(q + eps);
            value += p[j] * g[j] * inv_n;
            mean_g += p[j] * g[j];
        }
        for j in 0..n {
            // dL/dz_j = p_j (g_j - Σ p g); dz/dsim = 1/τ
            dsim[i * n + j] = p[j] * (g[j] - mean_g) * inv_n / tau;
        }
    }
    (value, dsim)
}

/// Instance cross-modal projection matching: in each direction, the KL
/// divergence between the softmax over in-batch similarities and the
/// normalized match distribution, averaged over anchors.
pub fn icpm(batch: &Batch, matches: &MatchMatrix, tau: f64, eps: f64) -> Result<LossOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch("icpm on empty batch".into()));
    }
    if matches.n() != n {
        return Err(Error::Shape(alloc::format!("match matrix is {0}x{0}, batch has {n}", matches.n())));
    }
    for i in 0..n {
        if matches.row_count(i) == 0 {
            return Err(Error::DegenerateMatch { axis: "row", index: i });
        }
        if matches.col_count(i) == 0 {
            return Err(Error::DegenerateMatch { axis: "column", index: i });
        }
    }
    let (fv, ft) = (&batch.image_features, &batch.text_features);
    let sims = fv.gram(ft);
    let mut out = LossOutput::zeros(n, batch.dim());

    let (v2t, d_v2t) = kl_direction(n, tau, eps, |i, j| sims.get(i, j), |i, j| matches.get(i, j));
    let (t2v, d_t2v) = kl_direction(n, tau, eps, |i, j| sims.get(j, i), |i, j| matches.get(j, i));
    out.value = v2t + t2v;

    for i in 0..n {
        for j in 0..n {
            // both directions expressed on sim(i, j) = f^v_i · f^t_j
            let d = d_v2t[i * n + j] + d_t2v[j * n + i];
            linalg::axpy(d, ft.row(j), out.grad_image.row_mut(i));
            linalg::axpy(d, fv.row(i), out.grad_text.row_mut(j));
            out.grad_temperature.instance -= d * sims.get(i, j) / tau;
        }
    }
    Ok(out)
}

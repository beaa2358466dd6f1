use alloc::vec;

use super::{softmax_ce, Batch, LossOutput};
use crate::linalg;
use crate::{Error, Result};

/// Bidirectional in-batch InfoNCE: row `i`'s image and caption are the
/// positive pair, every other row supplies negatives.
pub fn itc(batch: &Batch, tau: f64) -> Result<LossOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::EmptyBatch(alloc::format!("itc needs >= 2 pairs, got {n}")));
    }
    let (fv, ft) = (&batch.image_features, &batch.text_features);
    let sims = fv.gram(ft);
    let inv_n = 1.0 / n as f64;
    let mut out = LossOutput::zeros(n, batch.dim());
    let mut logits = vec![0.0; n];
    let mut dz = vec![0.0; n];

    // image -> text
    for i in 0..n {
        for j in 0..n {
            logits[j] = sims.get(i, j) / tau;
        }
        out.value += softmax_ce(&logits, i, &mut dz) * inv_n;
        for j in 0..n {
            let w = dz[j] * inv_n;
            linalg::axpy(w / tau, ft.row(j), out.grad_image.row_mut(i));
            linalg::axpy(w / tau, fv.row(i), out.grad_text.row_mut(j));
            out.grad_temperature.instance -= w * sims.get(i, j) / (tau * tau);
        }
    }
    // text -> image
    for i in 0..n {
        for j in 0..n {
            logits[j] = sims.get(j, i) / tau;
        }
        out.value += softmax_ce(&logits, i, &mut dz) * inv_n;
        for j in 0..n {
            let w = dz[j] * inv_n;
            linalg::axpy(w / tau, fv.row(j), out.grad_text.row_mut(i));
            linalg::axpy(w / tau, ft.row(i), out.grad_image.row_mut(j));
            out.grad_temperature.instance -= w * sims.get(j, i) / (tau * tau);
        }
    }
    Ok(out)
}

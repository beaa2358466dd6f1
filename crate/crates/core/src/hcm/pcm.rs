use alloc::vec;

use super::{softmax_ce, Batch, LossOutput};
use crate::linalg::{self, Matrix};
use crate::pmm::PrototypeMemory;
use crate::{Error, Result};

struct Direction {
    value: f64,
    grad_tau: f64,
}

/// Mean over items with a positive of `-log softmax(f·c / τ)[pos]`.
/// Gradient rows are written into `grad`.
fn prototype_direction(
    features: &Matrix,
    positives: &[Option<usize>],
    memory: &PrototypeMemory,
    tau: f64,
    grad: &mut Matrix,
) -> Result<Option<Direction>> {
    let protos = memory.prototypes();
    let k = protos.rows();
    let used: usize = positives.iter().flatten().count();
    if used == 0 {
        return Ok(None);
    }
    let inv_n = 1.0 / used as f64;
    let mut sims = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut dz = vec![0.0; k];
    let mut value = 0.0;
    let mut grad_tau = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        let Some(pos) = *pos else { continue };
        if pos >= k {
            return Err(Error::Index { cluster: pos, n_clusters: k });
        }
        let f = features.row(i);
        for c in 0..k {
            sims[c] = linalg::dot(f, protos.row(c));
            logits[c] = sims[c] / tau;
        }
        value += softmax_ce(&logits, pos, &mut dz);
        let g = grad.row_mut(i);
        for c in 0..k {
            let w = dz[c] * inv_n;
            linalg::axpy(w / tau, protos.row(c), g);
            grad_tau -= w * sims[c] / (tau * tau);
        }
    }
    Ok(Some(Direction { value: value * inv_n, grad_tau }))
}

/// Cross-modal prototype contrastive loss.
///
/// Image features are scored against the text memory with the image-side
/// temperature, the positive being the cluster of the row's caption; text
/// features are scored against the image memory with the text-side
/// temperature, the positive being the cluster of the row's image. Rows
/// whose positive is an outlier are dropped from that direction only.
pub fn pcm_cross(batch: &Batch, text_mem: &PrototypeMemory, image_mem: &PrototypeMemory) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    let v = prototype_direction(
        &batch.image_features,
        &batch.text_cluster,
        text_mem,
        image_mem.temperature(),
        &mut out.grad_image,
    )?;
    let t = prototype_direction(
        &batch.text_features,
        &batch.image_cluster,
        image_mem,
        text_mem.temperature(),
        &mut out.grad_text,
    )?;
    finish(out, v, t)
}

/// Single-modal prototype contrastive loss: each modality against its own
/// memory, the positive being the item's own cluster.
pub fn pcm_single(batch: &Batch, image_mem: &PrototypeMemory, text_mem: &PrototypeMemory) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    let v = prototype_direction(
        &batch.image_features,
        &batch.image_cluster,
        image_mem,
        image_mem.temperature(),
        &mut out.grad_image,
    )?;
    let t = prototype_direction(
        &batch.text_features,
        &batch.text_cluster,
        text_mem,
        text_mem.temperature(),
        &mut out.grad_text,
    )?;
    finish(out, v, t)
}

fn finish(mut out: LossOutput, v: Option<Direction>, t: Option<Direction>) -> Result<LossOutput> {
    if v.is_none() && t.is_none() {
        return Err(Error::EmptyBatch("no item has a prototype positive".into()));
    }
    if let Some(v) = v {
        out.value += v.value;
        out.grad_temperature.image += v.grad_tau;
    }
    if let Some(t) = t {
        out.value += t.value;
        out.grad_temperature.text += t.grad_tau;
    }
    Ok(out)
}

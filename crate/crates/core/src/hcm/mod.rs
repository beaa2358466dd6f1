//! Hybrid cross-modal matching losses.
//!
//! Every loss returns its value together with exact gradients with respect
//! to the batch's image and text feature matrices and to the temperatures
//! it uses. Prototype memories are constants here; they only move through
//! momentum updates.

mod icpm;
mod itc;
mod pcm;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::corpus::PairGraph;
use crate::linalg::Matrix;
use crate::pmm::PrototypeMemory;
use crate::{Error, Result};

pub use icpm::{build_match_matrix, icpm, MatchMatrix};
pub use itc::itc;
pub use pcm::{pcm_cross, pcm_single};

/// `B` paired items. Row `i` of both feature matrices is one image/text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image_features: Matrix,
    pub text_features: Matrix,
    pub image_ids: Vec<usize>,
    pub text_ids: Vec<usize>,
    /// Image-memory cluster of each row's image (`None` for outliers).
    pub image_cluster: Vec<Option<usize>>,
    /// Text-memory cluster of each row's caption (`None` for outliers).
    pub text_cluster: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(
        image_features: Matrix,
        text_features: Matrix,
        image_ids: Vec<usize>,
        text_ids: Vec<usize>,
        image_cluster: Vec<Option<usize>>,
        text_cluster: Vec<Option<usize>>,
    ) -> Result<Self> {
        let b = image_features.rows();
        let lens = [
            text_features.rows(),
            image_ids.len(),
            text_ids.len(),
            image_cluster.len(),
            text_cluster.len(),
        ];
        if lens.iter().any(|&l| l != b) {
            return Err(Error::Shape(format!("inconsistent batch lengths: {b} vs {lens:?}")));
        }
        if image_features.cols() != text_features.cols() {
            return Err(Error::Shape(format!(
                "image dim {} vs text dim {}",
                image_features.cols(),
                text_features.cols()
            )));
        }
        Ok(Batch { image_features, text_features, image_ids, text_ids, image_cluster, text_cluster })
    }

    /// Batch with features only and no cluster information.
    pub fn from_features(image_features: Matrix, text_features: Matrix) -> Result<Self> {
        let b = image_features.rows();
        Batch::new(
            image_features,
            text_features,
            (0..b).collect(),
            (0..b).collect(),
            alloc::vec![None; b],
            alloc::vec![None; b],
        )
    }

    pub fn len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.image_features.cols()
    }
}

/// Gradients with respect to the temperatures a loss reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrads {
    /// Image-side prototype temperature.
    pub image: f64,
    /// Text-side prototype temperature.
    pub text: f64,
    /// Instance-level temperature shared by ICPM / ITC.
    pub instance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
    pub grad_temperature: TemperatureGrads,
}

impl LossOutput {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad_image: Matrix::zeros(batch, dim),
            grad_text: Matrix::zeros(batch, dim),
            grad_temperature: TemperatureGrads::default(),
        }
    }

    pub fn accumulate(&mut self, other: &LossOutput) {
        self.value += other.value;
        self.grad_image.add_assign(&other.grad_image);
        self.grad_text.add_assign(&other.grad_text);
        self.grad_temperature.image += other.grad_temperature.image;
        self.grad_temperature.text += other.grad_temperature.text;
        self.grad_temperature.instance += other.grad_temperature.instance;
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_image.as_slice().iter().all(|x| x.is_finite())
            && self.grad_text.as_slice().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcmVariant {
    /// Features against the other modality's prototypes.
    Cross,
    /// Features against their own modality's prototypes.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub use_pcm: bool,
    pub pcm_variant: PcmVariant,
    pub use_icpm: bool,
    pub icpm_temperature: f64,
    pub icpm_epsilon: f64,
    pub itc_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_pcm: true,
            pcm_variant: PcmVariant::Cross,
            use_icpm: true,
            icpm_temperature: 0.07,
            icpm_epsilon: 1e-8,
            itc_temperature: 0.07,
        }
    }
}

/// Prototype term plus instance term with an explicit match matrix.
pub fn overall_loss_with_match(
    batch: &Batch,
    image_mem: &PrototypeMemory,
    text_mem: &PrototypeMemory,
    matches: &MatchMatrix,
    config: &LossConfig,
) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch.len(), batch.dim());
    if config.use_pcm {
        let pcm = match config.pcm_variant {
            PcmVariant::Cross => pcm_cross(batch, text_mem, image_mem)?,
            PcmVariant::Single => pcm_single(batch, image_mem, text_mem)?,
        };
        out.accumulate(&pcm);
    }
    if config.use_icpm {
        out.accumulate(&icpm(batch, matches, config.icpm_temperature, config.icpm_epsilon)?);
    }
    Ok(out)
}

/// Overall objective: prototype contrastive term plus instance projection
/// matching, either of which may be switched off.
pub fn overall_loss(
    batch: &Batch,
    image_mem: &PrototypeMemory,
    text_mem: &PrototypeMemory,
    image_labels: &PseudoLabeling,
    text_labels: &PseudoLabeling,
    pairs: &PairGraph,
    config: &LossConfig,
) -> Result<LossOutput> {
    let matches = build_match_matrix(batch, image_labels, text_labels, pairs);
    overall_loss_with_match(batch, image_mem, text_mem, &matches, config)
}

/// Writes `∂L/∂z` for `L = lse(z) - z[pos]` into `out` and returns the loss.
pub(crate) fn softmax_ce(logits: &[f64], pos: usize, out: &mut [f64]) -> f64 {
    crate::math::softmax_into(logits, out);
    let loss = crate::math::log_sum_exp(logits) - logits[pos];
    out[pos] -= 1.0;
    loss
}

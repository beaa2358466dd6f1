//! Loss probes: evaluate one loss on a batch stored as JSON.
//!
//! ```json
//! {
//!   "image_features": [[...], ...],
//!   "text_features": [[...], ...],
//!   "image_cluster": [0, null, ...],
//!   "text_cluster": [1, 0, ...],
//!   "image_prototypes": [[...], ...],
//!   "text_prototypes": [[...], ...],
//!   "temperature_image": 0.07,
//!   "temperature_text": 0.07,
//!   "matches": [[true, false], [false, true]],
//!   "loss": { "use_pcm": true, "use_icpm": true }
//! }
//! ```
//!
//! Cluster lists, prototypes, `matches` and `loss` are optional. Without
//! `matches` the identity matrix is used. Features and prototypes are used as
//! given, without normalisation.

use std::path::Path;

use clap::ValueEnum;
use cpcl_core::hcm::{self, Batch, LossConfig, LossOutput, MatchMatrix, TemperatureGrads};
use cpcl_core::linalg::Matrix;
use cpcl_core::pmm::PrototypeMemory;
use cpcl_core::Modality;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Overall,
    PcmCross,
    PcmSingle,
    Icpm,
    Itc,
}

fn default_temperature() -> f64 {
    0.07
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBatch {
    pub image_features: Vec<Vec<f64>>,
    pub text_features: Vec<Vec<f64>>,
    #[serde(default)]
    pub image_cluster: Option<Vec<Option<usize>>>,
    #[serde(default)]
    pub text_cluster: Option<Vec<Option<usize>>>,
    #[serde(default)]
    pub image_prototypes: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub text_prototypes: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_temperature")]
    pub temperature_image: f64,
    #[serde(default = "default_temperature")]
    pub temperature_text: f64,
    #[serde(default)]
    pub matches: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub loss: LossKind,
    pub value: f64,
    pub grad_image_norm: f64,
    pub grad_text_norm: f64,
    pub grad_temperature: TemperatureGrads,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(cpcl_core::Error::EmptyBatch(format!("{what} is empty")).into());
    }
    Ok(Matrix::from_rows(rows)?)
}

impl ProbeBatch {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    pub fn batch(&self) -> Result<Batch> {
        let img = matrix(&self.image_features, "image_features")?;
        let txt = matrix(&self.text_features, "text_features")?;
        let b = img.rows();
        let none = vec![None; b];
        Ok(Batch::new(
            img,
            txt,
            (0..b).collect(),
            (0..b).collect(),
            self.image_cluster.clone().unwrap_or_else(|| none.clone()),
            self.text_cluster.clone().unwrap_or(none),
        )?)
    }

    fn memory(&self, modality: Modality) -> Result<PrototypeMemory> {
        let (rows, tau) = match modality {
            Modality::Image => (&self.image_prototypes, self.temperature_image),
            Modality::Text => (&self.text_prototypes, self.temperature_text),
        };
        let rows = rows.as_ref().ok_or(cpcl_core::Error::EmptyMemory)?;
        let protos = matrix(rows, "prototypes")?;
        Ok(PrototypeMemory::from_prototypes(modality, protos, 0.9, tau)?)
    }

    fn match_matrix(&self, b: usize) -> Result<MatchMatrix> {
        match &self.matches {
            None => Ok(MatchMatrix::identity(b)),
            Some(rows) => {
                if rows.len() != b || rows.iter().any(|r| r.len() != b) {
                    return Err(cpcl_core::Error::Shape(format!("match matrix must be {b}x{b}")).into());
                }
                Ok(MatchMatrix::from_fn(b, |i, j| rows[i][j]))
            }
        }
    }

    pub fn evaluate(&self, kind: LossKind) -> Result<LossOutput> {
        let batch = self.batch()?;
        let cfg = &self.loss;
        let out = match kind {
            LossKind::Itc => hcm::itc(&batch, cfg.itc_temperature)?,
            LossKind::Icpm => {
                hcm::icpm(&batch, &self.match_matrix(batch.len())?, cfg.icpm_temperature, cfg.icpm_epsilon)?
            }
            LossKind::PcmCross => {
                hcm::pcm_cross(&batch, &self.memory(Modality::Text)?, &self.memory(Modality::Image)?)?
            }
            LossKind::PcmSingle => {
                hcm::pcm_single(&batch, &self.memory(Modality::Image)?, &self.memory(Modality::Text)?)?
            }
            LossKind::Overall => hcm::overall_loss_with_match(
                &batch,
                &self.memory(Modality::Image)?,
                &self.memory(Modality::Text)?,
                &self.match_matrix(batch.len())?,
                cfg,
            )?,
        };
        Ok(out)
    }

    pub fn probe(&self, kind: LossKind) -> Result<ProbeReport> {
        let out = self.evaluate(kind)?;
        Ok(ProbeReport {
            loss: kind,
            value: out.value,
            grad_image_norm: out.grad_image.frobenius_sq().sqrt(),
            grad_text_norm: out.grad_text.frobenius_sq().sqrt(),
            grad_temperature: out.grad_temperature,
        })
    }
}

//! Per-modality prototype memory: one row per pseudo-label cluster,
//! initialised from cluster members and moved by momentum updates.

use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::corpus::{EmbeddingSet, PairGraph};
use crate::linalg::{self, Matrix};
use crate::{Error, Modality, Result};

/// Lower / upper clamp for learnable temperatures.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.005, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Mean of the cluster's member features.
    Average,
    /// Feature of one uniformly drawn member.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub momentum: f64,
    pub init_policy: InitPolicy,
    pub renormalize: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { momentum: 0.9, init_policy: InitPolicy::Average, renormalize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    modality: Modality,
    prototypes: Matrix,
    momentum: f64,
    temperature: f64,
    renormalize: bool,
}

impl PrototypeMemory {
    /// Builds a memory directly from prototype rows.
    pub fn from_prototypes(modality: Modality, prototypes: Matrix, momentum: f64, temperature: f64) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(Error::EmptyMemory);
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1]")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature {temperature} must be > 0")));
        }
        Ok(PrototypeMemory { modality, prototypes, momentum, temperature, renormalize: true })
    }

    pub fn with_renormalize(mut self, on: bool) -> Self {
        self.renormalize = on;
        self
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_clusters(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn prototype(&self, cluster: usize) -> &[f64] {
        self.prototypes.row(cluster)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) {
        self.temperature = t.clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1);
    }

    /// `c <- m c + (1 - m) f`, then renormalised when enabled.
    pub fn momentum_update(&mut self, feature: &[f64], cluster: usize) -> Result<()> {
        if cluster >= self.n_clusters() {
            return Err(Error::Index { cluster, n_clusters: self.n_clusters() });
        }
        if feature.len() != self.prototypes.cols() {
            return Err(Error::Shape(format!(
                "feature dim {} vs memory dim {}",
                feature.len(),
                self.prototypes.cols()
            )));
        }
        let m = self.momentum;
        let row = self.prototypes.row_mut(cluster);
        for (c, f) in row.iter_mut().zip(feature) {
            *c = m * *c + (1.0 - m) * f;
        }
        if self.renormalize {
            linalg::normalize_in_place(row);
        }
        Ok(())
    }
}

/// Initialises a memory with one prototype per cluster of `labeling`.
/// Outliers contribute nothing.
pub fn init_memory(
    set: &EmbeddingSet,
    labeling: &PseudoLabeling,
    config: &MemoryConfig,
    temperature: f64,
    seed: u64,
) -> Result<PrototypeMemory> {
    if labeling.n_clusters() == 0 {
        return Err(Error::EmptyMemory);
    }
    if labeling.len() != set.count() {
        return Err(Error::Shape(format!(
            "labeling covers {} instances, set has {}",
            labeling.len(),
            set.count()
        )));
    }
    let clusters = labeling.clusters();
    let mut protos = Matrix::zeros(clusters.len(), set.dim());
    match config.init_policy {
        InitPolicy::Average => {
            for (c, members) in clusters.iter().enumerate() {
                let row = protos.row_mut(c);
                for &i in members {
                    linalg::axpy(1.0, set.vector(i), row);
                }
                let inv = 1.0 / members.len() as f64;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        InitPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (c, members) in clusters.iter().enumerate() {
                let pick = members[rng.random_range(0..members.len())];
                protos.row_mut(c).copy_from_slice(set.vector(pick));
            }
        }
    }
    if config.renormalize {
        for c in 0..protos.rows() {
            linalg::normalize_in_place(protos.row_mut(c));
        }
    }
    let mut mem = PrototypeMemory::from_prototypes(set.modality(), protos, config.momentum, temperature)?;
    mem.renormalize = config.renormalize;
    Ok(mem)
}

/// Cross-modal positive prototype for an instance: the cluster, in the other
/// modality's labeling, of its paired partner.
///
/// `partner` selects which paired instance is used when there are several
/// (the one drawn into the batch); `None` takes the first. Returns `None`
/// when that partner is an outlier.
pub fn lookup_positive(
    modality: Modality,
    instance: usize,
    partner: Option<usize>,
    opposite: &PseudoLabeling,
    pairs: &PairGraph,
) -> Result<Option<usize>> {
    let partners = pairs.partners(modality, instance);
    let chosen = match partner {
        Some(p) if partners.contains(&p) => p,
        Some(p) => {
            return Err(Error::ReferentialIntegrity(format!(
                "{modality} {instance} is not paired with {} {p}",
                modality.other()
            )))
        }
        None => *partners.first().ok_or_else(|| {
            Error::ReferentialIntegrity(format!("{modality} {instance} has no pairs"))
        })?,
    };
    Ok(opposite.label(chosen))
}

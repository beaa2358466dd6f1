//! Prototypical cross-modal contrastive learning for weakly supervised
//! image/text retrieval.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece of
//! the pipeline:
//!
//! - [`corpus`]: embedding sets, the many-to-many pair graph, synthetic corpora
//! - [`affinity`]: cosine and k-reciprocal Jaccard distance matrices
//! - [`clustering`]: DBSCAN and k-means pseudo labels
//! - [`pmm`]: per-modality prototype memory with momentum updates
//! - [`hcm`]: prototype / instance contrastive losses with exact gradients
//! - [`oplm`]: outlier pseudo-label mining and the two-stage pair partition
//! - [`trainer`]: projection heads, Adam, LR schedule and the epoch loop
//! - [`metrics`]: Rank-k, mAP and mINP retrieval evaluation
//!
//! File formats, checkpoints and the command-line driver live in the `cpcl`
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod affinity;
pub mod clustering;
pub mod corpus;
mod error;
pub mod hcm;
pub mod linalg;
pub(crate) mod math;
pub mod metrics;
pub mod oplm;
pub mod pmm;
pub mod trainer;

pub use error::{Error, Result};

/// The two modalities of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Modality::Image => f.write_str("image"),
            Modality::Text => f.write_str("text"),
        }
    }
}

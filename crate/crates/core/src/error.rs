use alloc::string::String;

use crate::Modality;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("zero-norm {modality} vector at id {id}")]
    DegenerateVector { modality: Modality, id: usize },
    #[error("referential integrity violated: {0}")]
    ReferentialIntegrity(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prototype memory would have no clusters")]
    EmptyMemory,
    #[error("cluster {cluster} out of range for memory with {n_clusters} prototypes")]
    Index { cluster: usize, n_clusters: usize },
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("match matrix {axis} {index} has no positive entry")]
    DegenerateMatch { axis: &'static str, index: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("epoch produced no usable batch in either stage")]
    DegenerateEpoch,
    #[error("evaluation requires ground-truth identities")]
    EvalWithoutTruth,
    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),
}

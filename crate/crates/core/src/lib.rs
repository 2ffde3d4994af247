//! Person re-identification training on a mix of multi-camera and
//! single-camera data: noisy-label refinement with a centroid memory,
//! Hungarian pairing of identities into mixed mini-batches, and retrieval
//! evaluation.

pub mod assign;
pub mod bench;
pub mod centroids;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod relabel;
pub mod rng;
pub mod sampler;
pub mod similarity;
pub mod synth;
pub mod trainloop;
pub mod types;

pub use error::{Error, Result};
pub use types::{DatasetManifest, EmbeddingMatrix, Pid, SampleId, SampleRecord, Source, Split};

//! File formats and configuration: GCGT binary tensors, JSON manifests, and
//! the run configuration. This is the boundary through which precomputed
//! embeddings enter the system.

pub mod config;
pub mod manifest;
pub mod tensorfile;

pub use config::{load_config, RunConfig};
pub use manifest::{
    content_hash, description_hash, load_manifest, save_manifest, Dataset, Manifest, SampleRecord,
};
pub use tensorfile::{decode_tensor, encode_tensor, read_header, read_tensor, write_tensor};

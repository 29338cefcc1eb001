//! On-disk embeddings, dataset manifests and batching.

mod batch;
mod manifest;
mod slem;

pub use batch::{make_batches, Batch, BatchIter, Sample, SampleSet};
pub use manifest::{load_manifest, write_manifest, Label, ManifestRecord, Split};
pub use slem::{
    decode_embedding, encode_embedding, read_embedding, write_embedding, EmbeddingTensor, Subspace,
    SLEM_HEADER_LEN, SLEM_MAGIC, SLEM_VERSION,
};

//! Dataset I/O: feature files, manifests, batching and synthetic data.

mod batch;
mod features;
mod manifest;
mod synth;

pub use batch::{make_batches, Batch, BatchTarget};
pub use features::{read_features, write_features, FeatureSequence, HEADER_LEN, MAGIC};
pub use manifest::{
    culture_columns, export_samples, high_columns, parse_manifest, read_manifest, split_histogram,
    write_manifest, LabeledSample, ManifestRow, Split,
};
pub use synth::{generate_synthetic, SynthSpec, LATENT_DIM};

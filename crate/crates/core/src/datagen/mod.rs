//! Synthetic aligned multimodal data, restriction, masking and feature files.

mod example;
mod features;
mod generate;
mod mask;
mod modality;

pub use example::{Label, MultimodalExample, TaskKind, TaskSpec};
pub use features::{
    bundle_hash, decode_mmfd, encode_mmfd, ingest_features, load_bundle, read_csv, read_mmfd,
    save_bundle, write_csv, write_mmfd, BundleMeta, FeatureManifest, FeatureModality, BUNDLE_FILES,
};
pub use generate::{generate, DatasetBundle, GenConfig, ModalitySpec, SplitSizes};
pub use mask::{mask_view, masked_count, MaskedView};
pub use modality::{ModalitySet, ModalityUniverse, MAX_MODALITIES};

//! Samples, manifests, synthetic vehicles, PK sampling and augmentation.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod sample;
pub mod sampler;
pub mod store;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy, Rect};
pub use manifest::{load_manifest, write_manifest, ManifestRecord};
pub use sample::{AttributeSchema, Dataset, DatasetMeta, Sample, Split};
pub use sampler::{batches_per_epoch, pk_sample, PkBatch};
pub use store::{load_split, load_splits, write_dataset, write_splits};
pub use synthetic::{gen_synthetic, split_by_identity, Splits, SyntheticSpec};

//! Datasets, augmentation and deterministic batching.

mod augment;
mod batches;
mod cifar;
mod set;
mod synthetic;

pub use augment::{AugmentationPolicy, Normalization};
pub use batches::{epoch_order, Batch, BatchPlan, EpochBatches};
pub use cifar::{decode_records, encode_records, load_cifar, CifarVariant, CIFAR_PIXELS, CIFAR_SIDE};
pub use set::LabeledImageSet;
pub use synthetic::{synthetic_set, SyntheticSpec, DEFAULT_DIFFICULTY};
